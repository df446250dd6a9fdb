//! Binary tensor file: magic, version, JSON metadata, named f64 tensors,
//! trailing SHA-256 of everything before it.
//!
//! ```text
//! "PPGT" | u32 version | u64 meta_len | meta (utf-8 JSON)
//! u64 count | { u64 name_len | name | u64 ndim | u64 dims[ndim] | f64 data[] }*
//! [u8; 32] sha256
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PPGT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::Store(format!("missing tensor `{name}`")))
    }

    pub fn from_params(meta: serde_json::Value, params: &ParamStore) -> Self {
        Self { meta, tensors: params.named().map(|(n, t)| (n.to_string(), t.clone())).collect() }
    }

    pub fn to_params(&self) -> ParamStore {
        ParamStore::from_named(self.tensors.iter().cloned())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        put_u64(&mut buf, meta.len() as u64);
        buf.extend_from_slice(&meta);
        put_u64(&mut buf, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_u64(&mut buf, name.len() as u64);
            buf.extend_from_slice(name.as_bytes());
            put_u64(&mut buf, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut buf, d as u64);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(NnError::Store("not a tensor file (bad magic)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(NnError::Store("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(NnError::Store(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| NnError::Store(format!("bad metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u64()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| NnError::Store("tensor name is not utf-8".into()))?;
            let ndim = r.u64()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| NnError::Store("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&dims, data)));
        }
        if r.pos != body.len() {
            return Err(NnError::Store("trailing bytes before checksum".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NnError::Store(m) => NnError::Store(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Store("truncated tensor file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

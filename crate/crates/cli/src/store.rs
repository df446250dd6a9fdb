//! Content-addressed, append-only artifact store.
//!
//! ```text
//! <root>/artifacts/<name>-<key16>.<ext>   (+ .sha256 sidecar)
//! <root>/manifests/<config16>.json
//! <root>/reports/<config16>/
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppgen_nn::TensorFile;

use crate::error::{CliError, Result};

pub const STORE_ENV: &str = "PPGEN_STORE";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Path relative to the store root plus the SHA-256 of the file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Write through a uniquely named sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["artifacts", "manifests", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, r: &ArtifactRef) -> PathBuf {
        self.root.join(&r.path)
    }

    fn relative(name: &str, key: &str, ext: &str) -> String {
        format!("artifacts/{name}-{}.{ext}", &key[..16.min(key.len())])
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".sha256");
        PathBuf::from(s)
    }

    /// The stored artifact for `(name, key)`, verified against its checksum.
    /// `None` when it was never written completely.
    pub fn lookup(&self, name: &str, key: &str, ext: &str) -> Result<Option<ArtifactRef>> {
        let rel = Self::relative(name, key, ext);
        let path = self.root.join(&rel);
        let side = Self::sidecar(&path);
        if !path.exists() || !side.exists() {
            return Ok(None);
        }
        let expect = fs::read_to_string(&side)?.trim().to_string();
        let r = ArtifactRef { path: rel, sha256: expect };
        self.read(&r)?;
        Ok(Some(r))
    }

    /// Never replaces existing content: rewriting identical bytes is a no-op,
    /// different bytes under the same key are an integrity error.
    pub fn put(&self, name: &str, key: &str, ext: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        let rel = Self::relative(name, key, ext);
        let path = self.root.join(&rel);
        let sha = sha256_hex(bytes);
        if path.exists() {
            let existing = sha256_hex(&fs::read(&path)?);
            if existing != sha {
                return Err(CliError::Integrity {
                    path: rel,
                    detail: format!("refusing to overwrite content {existing} with {sha}"),
                });
            }
        } else {
            write_atomic(&path, bytes)?;
        }
        let side = Self::sidecar(&path);
        if !side.exists() {
            write_atomic(&side, format!("{sha}\n").as_bytes())?;
        }
        Ok(ArtifactRef { path: rel, sha256: sha })
    }

    pub fn read(&self, r: &ArtifactRef) -> Result<Vec<u8>> {
        let bytes = fs::read(self.resolve(r))?;
        let got = sha256_hex(&bytes);
        if got != r.sha256 {
            return Err(CliError::Integrity {
                path: r.path.clone(),
                detail: format!("expected {}, found {got}", r.sha256),
            });
        }
        Ok(bytes)
    }

    pub fn put_tensors(&self, name: &str, key: &str, f: &TensorFile) -> Result<ArtifactRef> {
        self.put(name, key, "ppgt", &f.to_bytes())
    }

    pub fn read_tensors(&self, r: &ArtifactRef) -> Result<TensorFile> {
        Ok(TensorFile::from_bytes(&self.read(r)?)?)
    }

    pub fn manifest_path(&self, config_hash: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", &config_hash[..16]))
    }

    pub fn report_dir(&self, config_hash: &str) -> PathBuf {
        self.root.join("reports").join(&config_hash[..16])
    }
}

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

fn next_key() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// Named, ordered parameter registry.
///
/// Every store carries a process-unique key so one graph can hold parameters
/// of several stores; clones share the key of their source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Entry>,
    #[serde(skip, default = "next_key")]
    key: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self { entries: Vec::new(), key: next_key() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for d in e.value.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Rebuilds a store from `(name, tensor)` pairs; all entries trainable.
    pub fn from_named(items: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        let mut s = Self::new();
        for (n, t) in items {
            s.add(n, t);
        }
        s
    }

    /// Copies values (not trainability) from `other`, matched by name.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src =
                other.entries.iter().find(|o| o.name == e.name).ok_or_else(|| NnError::UnknownParam(e.name.clone()))?;
            if src.value.shape() != e.value.shape() {
                return Err(NnError::Store(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

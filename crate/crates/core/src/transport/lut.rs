use std::collections::BTreeMap;
use std::sync::Arc;

use ppgen_nn::{Tensor, TensorFile};

use super::{simulate, DetectorReading, Mode, PhotonRecord, ScatterRun, SlabGeometry, Tally};
use crate::error::{PpgError, Result};
use crate::optics::N_LAYERS;
use crate::rng;

/// Serves absorption queries from cached scatter-only runs, one per `mu_s`.
#[derive(Debug, Clone)]
pub struct LutSimulator {
    pub geometry: SlabGeometry,
    pub g: f64,
    pub n_photons: u64,
    pub seed: u64,
    runs: BTreeMap<u64, Arc<ScatterRun>>,
}

impl LutSimulator {
    pub fn new(geometry: SlabGeometry, g: f64, n_photons: u64, seed: u64) -> Self {
        Self { geometry, g, n_photons, seed, runs: BTreeMap::new() }
    }

    /// Seed of the run at `mu_s`; independent of the order runs are prepared in.
    pub fn run_seed(&self, mu_s: f64) -> u64 {
        rng::derive_index(self.seed ^ self.geometry.digest(), mu_s.to_bits())
    }

    pub fn contains(&self, mu_s: f64) -> bool {
        self.runs.contains_key(&mu_s.to_bits())
    }

    pub fn mu_s_values(&self) -> Vec<f64> {
        self.runs.keys().map(|k| f64::from_bits(*k)).collect()
    }

    pub fn run(&self, mu_s: f64) -> Result<&Arc<ScatterRun>> {
        self.runs.get(&mu_s.to_bits()).ok_or(PpgError::CacheMiss(mu_s))
    }

    /// Trace any `mu_s` values not yet cached.
    pub fn prepare(&mut self, mu_s_values: &[f64]) -> Result<()> {
        for &mu_s in mu_s_values {
            if !self.contains(mu_s) {
                let out =
                    simulate(&self.geometry, mu_s, self.g, Mode::ScatterOnly, self.n_photons, self.run_seed(mu_s))?;
                self.insert(out.into_scatter_run(mu_s, self.g));
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, run: ScatterRun) {
        self.runs.insert(run.mu_s.to_bits(), Arc::new(run));
    }

    pub fn simulate_lut_point(&self, mu_a: &[f64; N_LAYERS], mu_s: f64) -> Result<DetectorReading> {
        self.run(mu_s)?.apply_absorption(mu_a)
    }
}

impl ScatterRun {
    /// Records as an `(n, 5)` tensor `[detector, s1, s2, s3, weight]`.
    pub fn to_tensor_file(&self) -> TensorFile {
        let meta = serde_json::json!({
            "kind": "scatter_run",
            "mu_s": self.mu_s,
            "g": self.g,
            "n_photons": self.n_photons,
            "n_detectors": self.n_detectors,
            "tally": self.tally,
        });
        let mut data = Vec::with_capacity(self.records.len() * 5);
        for r in &self.records {
            data.extend_from_slice(&[r.detector as f64, r.paths[0], r.paths[1], r.paths[2], r.weight]);
        }
        let mut f = TensorFile::new(meta);
        f.push("records", Tensor::new(&[self.records.len(), 5], data));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| PpgError::Invalid(format!("scatter run file: {what}"));
        let m = &f.meta;
        if m["kind"] != "scatter_run" {
            return Err(bad("wrong kind"));
        }
        let num = |k: &str| m[k].as_f64().ok_or_else(|| bad(k));
        let n_detectors = m["n_detectors"].as_u64().ok_or_else(|| bad("n_detectors"))? as usize;
        let tally: Tally = serde_json::from_value(m["tally"].clone()).map_err(|_| bad("tally"))?;
        let t = f.get("records")?;
        if t.shape().len() != 2 || t.shape()[1] != 5 {
            return Err(bad("records shape"));
        }
        let records = t
            .data()
            .chunks_exact(5)
            .map(|c| {
                let d = c[0] as usize;
                if d >= n_detectors {
                    return Err(bad("detector index"));
                }
                Ok(PhotonRecord { detector: d as u8, paths: [c[1], c[2], c[3]], weight: c[4] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mu_s: num("mu_s")?,
            g: num("g")?,
            n_photons: m["n_photons"].as_u64().ok_or_else(|| bad("n_photons"))?,
            n_detectors,
            records,
            tally,
        })
    }
}

//! Labeled pulse collections: parameter draws with clean or observed pulses.

use rayon::prelude::*;

use ppgen_nn::{Tensor, TensorFile};

use crate::domain::{BioParams, PulseTensor, Statics, N_STATIC};
use crate::error::{PpgError, Result};
use crate::forward::Simulator;
use crate::rng;
use crate::sensor::{add_noise, MisspecPlan, NoiseLevel};

/// Parameters and one pulse per sample, all sharing a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub thetas: Vec<BioParams>,
    pub pulses: Vec<PulseTensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { thetas: self.thetas[range.clone()].to_vec(), pulses: self.pulses[range].to_vec() }
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.pulses.first().map(|p| (p.receivers, p.channels, p.timesteps))
    }

    /// Independent noise on every pulse; sample `i` draws from its own stream.
    pub fn with_noise(&self, level: NoiseLevel, seed: u64) -> Result<Self> {
        let pulses = self
            .pulses
            .par_iter()
            .enumerate()
            .map(|(i, p)| add_noise(p, level, &mut rng::indexed(seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { thetas: self.thetas.clone(), pulses })
    }

    pub fn to_tensor_file(&self, meta: serde_json::Value) -> Result<TensorFile> {
        let (r, n, t) = self.shape().ok_or_else(|| PpgError::Invalid("empty dataset".into()))?;
        let mut theta = Vec::with_capacity(self.len() * (N_STATIC + 2 * t));
        for b in &self.thetas {
            theta.extend_from_slice(b.statics.as_slice());
            theta.extend_from_slice(&b.dbv2);
            theta.extend_from_slice(&b.dbv3);
        }
        let x: Vec<f64> = self.pulses.iter().flat_map(|p| p.values.iter().copied()).collect();
        let mut meta = meta;
        meta["kind"] = "dataset".into();
        meta["labels"] = serde_json::to_value(&self.pulses[0].labels).expect("labels serialize");
        let mut f = TensorFile::new(meta);
        f.push("theta", Tensor::new(&[self.len(), N_STATIC + 2 * t], theta));
        f.push("x", Tensor::new(&[self.len(), r, n, t], x));
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| PpgError::Invalid(format!("dataset file: {what}"));
        if f.meta["kind"] != "dataset" {
            return Err(bad("wrong kind"));
        }
        let labels: Vec<String> = serde_json::from_value(f.meta["labels"].clone()).map_err(|_| bad("labels"))?;
        let theta = f.get("theta")?;
        let x = f.get("x")?;
        let &[m, r, n, t] = x.shape() else {
            return Err(bad("x must be 4-d"));
        };
        if theta.shape() != [m, N_STATIC + 2 * t] || labels.len() != n {
            return Err(bad("shape mismatch"));
        }
        let thetas = theta
            .data()
            .chunks_exact(N_STATIC + 2 * t)
            .map(|c| {
                let statics = Statics(c[..N_STATIC].try_into().expect("static slice"));
                BioParams::new(statics, c[N_STATIC..N_STATIC + t].to_vec(), c[N_STATIC + t..].to_vec())
            })
            .collect::<Result<_>>()?;
        let pulses = x
            .data()
            .chunks_exact(r * n * t)
            .map(|c| PulseTensor::new(r, n, t, c.to_vec(), labels.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { thetas, pulses })
    }
}

/// Prior draws and their noiseless pulses.
pub fn generate_clean(sim: &Simulator, n: usize, seed: u64) -> Result<Dataset> {
    let (thetas, pulses) = (0..n)
        .into_par_iter()
        .map(|i| {
            let theta = sim.sample_theta(&mut rng::indexed(seed, i as u64))?;
            let pulse = sim.forward_pulse(&theta)?;
            Ok((theta, pulse))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Dataset { thetas, pulses })
}

/// Observations for a misspecification plan. `obs_sim` must already be the
/// simulator observations come from (the perturbed skin for skin kinds).
pub fn generate_observations(obs_sim: &Simulator, plan: &MisspecPlan, n: usize, seed: u64) -> Result<Dataset> {
    let clean = generate_clean(obs_sim, n, rng::derive(seed, "theta"))?;
    let noise_root = rng::derive(seed, "obs-noise");
    let pulses = clean
        .pulses
        .par_iter()
        .enumerate()
        .map(|(i, p)| plan.observe(p, &mut rng::indexed(noise_root, i as u64)))
        .collect::<Result<_>>()?;
    Ok(Dataset { thetas: clean.thetas, pulses })
}

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ppgen_nn::{cosine_lr, AdamW, Graph, ParamStore, Tensor, TensorFile, Var};

use super::encoder::{Encoder, EncoderConfig};
use super::features::{stack_pulses, FeatureNorm};
use crate::dataset::Dataset;
use crate::domain::{BioParams, ParamSpace, PulseTensor, Statics, N_DYNAMIC, N_PARAMS, N_STATIC};
use crate::error::{PpgError, Result};
use crate::rng;
use crate::sensor::NoiseLevel;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Parameter boxes and fixed posterior widths (the prior standard deviations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub lo: [f64; N_PARAMS],
    pub hi: [f64; N_PARAMS],
    pub sigma: [f64; N_PARAMS],
}

impl OutputMap {
    pub fn from_space(space: &ParamSpace) -> Self {
        let mut m = Self { lo: [0.0; N_PARAMS], hi: [0.0; N_PARAMS], sigma: [0.0; N_PARAMS] };
        for (i, r) in space.statics.iter().chain(&space.dynamics).enumerate() {
            m.lo[i] = r.lo;
            m.hi[i] = r.hi;
            m.sigma[i] = r.std();
        }
        m
    }

    /// `lo + (hi - lo) * Phi(z)`.
    pub fn map(&self, i: usize, z: f64) -> f64 {
        self.lo[i] + (self.hi[i] - self.lo[i]) * ppgen_nn::kernels::normal_cdf(z)
    }

    /// Latent standard deviation giving parameter spread `sigma` at the box centre.
    pub fn latent_std(&self, i: usize) -> f64 {
        self.sigma[i] / (self.hi[i] - self.lo[i]) * SQRT_2PI
    }

    fn static_tensor(&self, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[N_STATIC], f)
    }

    fn dynamic_tensor(&self, t: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[N_DYNAMIC, t], |k| f(N_STATIC + k / t))
    }
}

/// Gaussian posterior in latent space around the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub z_static: [f64; N_STATIC],
    /// `(2, T)` row-major.
    pub z_dynamic: Vec<f64>,
    pub mean: BioParams,
}

impl Posterior {
    fn from_latents(map: &OutputMap, zs: &[f64], zd: &[f64]) -> Result<Self> {
        let t = zd.len() / N_DYNAMIC;
        let mut s = [0.0; N_STATIC];
        for i in 0..N_STATIC {
            s[i] = map.map(i, zs[i]);
        }
        let dyn_at =
            |k: usize| -> Vec<f64> { zd[k * t..(k + 1) * t].iter().map(|z| map.map(N_STATIC + k, *z)).collect() };
        Ok(Self {
            z_static: zs.try_into().expect("static latents"),
            z_dynamic: zd.to_vec(),
            mean: BioParams::new(Statics(s), dyn_at(0), dyn_at(1))?,
        })
    }

    /// One draw: latent Gaussian noise, then the range mapping.
    pub fn sample(&self, map: &OutputMap, rng: &mut impl Rng) -> Result<BioParams> {
        let mut zs = self.z_static;
        for (i, z) in zs.iter_mut().enumerate() {
            *z += map.latent_std(i) * rng.sample::<f64, _>(StandardNormal);
        }
        let t = self.z_dynamic.len() / N_DYNAMIC;
        let zd: Vec<f64> = self
            .z_dynamic
            .iter()
            .enumerate()
            .map(|(k, z)| z + map.latent_std(N_STATIC + k / t) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self::from_latents(map, &zs, &zd)?.mean)
    }
}

#[derive(Debug, Clone)]
pub struct NpeModel {
    pub encoder: Encoder,
    pub params: ParamStore,
    pub norm: FeatureNorm,
    pub map: OutputMap,
}

/// Latents and range-mapped outputs of one forward pass.
pub struct NpeOutputs {
    pub z_static: Var,
    pub z_dynamic: Var,
    pub statics: Var,
    pub dynamics: Var,
}

impl NpeModel {
    pub fn init(config: &EncoderConfig, norm: FeatureNorm, space: &ParamSpace, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, "npe-init");
        let encoder =
            Encoder::new(config, norm.in_channels(), norm.timesteps, N_STATIC, N_DYNAMIC, &mut params, &mut rng)?;
        Ok(Self { encoder, params, norm, map: OutputMap::from_space(space) })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.norm.receivers, self.norm.channels, self.norm.timesteps)
    }

    /// `x (B, R, N, T)` raw pulses through features, encoder and range map,
    /// using parameters from `store` (which may carry extra entries).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<NpeOutputs> {
        let f = self.norm.graph(g, x)?;
        let (zs, zd) = self.encoder.forward(g, store, f)?;
        let t = self.norm.timesteps;
        let m = &self.map;
        let lo_s = g.input(m.static_tensor(|i| m.lo[i]));
        let w_s = g.input(m.static_tensor(|i| m.hi[i] - m.lo[i]));
        let lo_d = g.input(m.dynamic_tensor(t, |i| m.lo[i]));
        let w_d = g.input(m.dynamic_tensor(t, |i| m.hi[i] - m.lo[i]));
        let ps = g.normal_cdf(zs);
        let ps = g.mul_bcast(ps, w_s)?;
        let statics = g.add_bcast(ps, lo_s)?;
        let pd = g.normal_cdf(zd);
        let pd = g.mul_bcast(pd, w_d)?;
        let dynamics = g.add_bcast(pd, lo_d)?;
        Ok(NpeOutputs { z_static: zs, z_dynamic: zd, statics, dynamics })
    }

    /// Prior-std-scaled squared error, statics and dynamics weighted by count.
    pub fn loss(&self, g: &mut Graph, out: &NpeOutputs, thetas: &[&BioParams]) -> Result<Var> {
        let t = self.norm.timesteps;
        let b = thetas.len();
        let m = &self.map;
        let ts = Tensor::from_fn(&[b, N_STATIC], |k| thetas[k / N_STATIC].statics.0[k % N_STATIC]);
        let td = Tensor::from_fn(&[b, N_DYNAMIC, t], |k| {
            let (i, rest) = (k / (N_DYNAMIC * t), k % (N_DYNAMIC * t));
            let th = thetas[i];
            if rest < t {
                th.dbv2[rest]
            } else {
                th.dbv3[rest - t]
            }
        });
        let ts = g.input(ts);
        let td = g.input(td);
        let inv_s = g.input(m.static_tensor(|i| 1.0 / m.sigma[i]));
        let inv_d = g.input(m.dynamic_tensor(t, |i| 1.0 / m.sigma[i]));
        let es = g.sub(out.statics, ts)?;
        let es = g.mul_bcast(es, inv_s)?;
        let ed = g.sub(out.dynamics, td)?;
        let ed = g.mul_bcast(ed, inv_d)?;
        let zs = g.input(Tensor::zeros(g.shape(es)));
        let zd = g.input(Tensor::zeros(g.shape(ed)));
        let ls = g.mse(es, zs)?;
        let ld = g.mse(ed, zd)?;
        let ls = g.scale(ls, N_STATIC as f64 / N_PARAMS as f64);
        let ld = g.scale(ld, N_DYNAMIC as f64 / N_PARAMS as f64);
        Ok(g.add(ls, ld)?)
    }

    /// Posterior for every pulse, evaluated in chunks.
    pub fn predict(&self, pulses: &[PulseTensor]) -> Result<Vec<Posterior>> {
        let chunks: Vec<Vec<Posterior>> = pulses
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&PulseTensor> = chunk.iter().collect();
                let mut g = Graph::new();
                let x = g.input(stack_pulses(&refs)?);
                let out = self.forward(&mut g, &self.params, x)?;
                let zs = g.value(out.z_static).data();
                let zd = g.value(out.z_dynamic).data();
                let dn = zd.len() / chunk.len();
                (0..chunk.len())
                    .map(|i| {
                        Posterior::from_latents(
                            &self.map,
                            &zs[i * N_STATIC..(i + 1) * N_STATIC],
                            &zd[i * dn..(i + 1) * dn],
                        )
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Mean loss over a labeled set.
    pub fn evaluate_loss(&self, data: &Dataset, batch: usize) -> Result<f64> {
        let mut total = 0.0;
        for start in (0..data.len()).step_by(batch.max(1)) {
            let end = (start + batch).min(data.len());
            let refs: Vec<&PulseTensor> = data.pulses[start..end].iter().collect();
            let thetas: Vec<&BioParams> = data.thetas[start..end].iter().collect();
            let mut g = Graph::new();
            let x = g.input(stack_pulses(&refs)?);
            let out = self.forward(&mut g, &self.params, x)?;
            let l = self.loss(&mut g, &out, &thetas)?;
            total += g.value(l).item() * (end - start) as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn to_tensor_file(&self, space: &ParamSpace) -> TensorFile {
        let meta = serde_json::json!({
            "kind": "npe",
            "encoder": self.encoder.config,
            "norm": self.norm,
            "space": space,
        });
        TensorFile::from_params(meta, &self.params)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| PpgError::Invalid(format!("NPE file: {what}"));
        if f.meta["kind"] != "npe" {
            return Err(bad("wrong kind"));
        }
        let config: EncoderConfig = serde_json::from_value(f.meta["encoder"].clone()).map_err(|_| bad("encoder"))?;
        let norm: FeatureNorm = serde_json::from_value(f.meta["norm"].clone()).map_err(|_| bad("norm"))?;
        let space: ParamSpace = serde_json::from_value(f.meta["space"].clone()).map_err(|_| bad("space"))?;
        let mut model = Self::init(&config, norm, &space, 0)?;
        model.params.load_values(&f.to_params())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpeConfig {
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub t_max: usize,
    pub weight_decay: f64,
    pub val_every: usize,
    pub seed: u64,
}

impl NpeConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
            eta_min: 1e-4,
            t_max: 3000,
            weight_decay: 2.8e-8,
            val_every: 100,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            steps: 250_000,
            batch_size: 200,
            lr: 7e-4,
            eta_min: 7.8e-5,
            t_max: 191_500,
            weight_decay: 2.8e-8,
            val_every: 100,
            seed: 0,
        }
    }

    pub fn wide(mut self) -> Self {
        self.encoder = self.encoder.with_embedding(Vec::new(), 64);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpeReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_loss: f64,
}

/// Train on simulated pulses with fresh measurement noise every step; keep
/// the checkpoint with the lowest validation loss.
pub fn pretrain_npe(
    space: &ParamSpace,
    train: &Dataset,
    val: &Dataset,
    noise: NoiseLevel,
    config: &NpeConfig,
) -> Result<(NpeModel, NpeReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(PpgError::Invalid("NPE training needs non-empty train and validation sets".into()));
    }
    let norm_sample = train.with_noise(noise, rng::derive(config.seed, "norm-noise"))?;
    let norm = FeatureNorm::fit(&norm_sample.pulses)?;
    let mut model = NpeModel::init(&config.encoder, norm, space, config.seed)?;
    let val = val.with_noise(noise, rng::derive(config.seed, "val-noise"))?;

    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut rng = rng::stream(config.seed, "npe-batches");
    let noise_root = rng::derive(config.seed, "npe-noise");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut report = NpeReport {
        train_loss: Vec::with_capacity(config.steps),
        val_loss: Vec::new(),
        best_step: 0,
        best_val_loss: f64::INFINITY,
    };

    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let step_seed = rng::derive_index(noise_root, step as u64);
        let noisy: Vec<PulseTensor> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| crate::sensor::add_noise(&train.pulses[i], noise, &mut rng::indexed(step_seed, k as u64)))
            .collect::<Result<_>>()?;
        let refs: Vec<&PulseTensor> = noisy.iter().collect();
        let thetas: Vec<&BioParams> = idx.iter().map(|&i| &train.thetas[i]).collect();

        let mut g = Graph::new();
        let x = g.input(stack_pulses(&refs)?);
        let out = model.forward(&mut g, &model.params, x)?;
        let loss = model.loss(&mut g, &out, &thetas)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(PpgError::Diverged(format!("NPE loss {lv} at step {step}")));
        }
        let grads = g.backward(loss);
        opt.lr = cosine_lr(step, config.lr, config.t_max, config.eta_min);
        opt.step(&mut model.params, &grads)?;
        report.train_loss.push(lv);

        if (step + 1) % config.val_every.max(1) == 0 || step + 1 == config.steps {
            let v = model.evaluate_loss(&val, 256)?;
            report.val_loss.push((step + 1, v));
            if v < best.0 {
                best = (v, step + 1, model.params.clone());
            }
        }
    }
    if config.steps > 0 {
        model.params = best.2;
        report.best_step = best.1;
        report.best_val_loss = best.0;
    } else {
        report.best_val_loss = model.evaluate_loss(&val, 256)?;
    }
    Ok((model, report))
}

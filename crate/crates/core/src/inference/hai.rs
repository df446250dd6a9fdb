use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use ppgen_nn::{cosine_lr, AdamW, Graph, ParamId, ParamStore, Tensor, Var};

use super::encoder::EncoderConfig;
use super::features::{raw_features, stack_pulses, FeatureNorm};
use super::npe::{NpeModel, Posterior};
use crate::domain::{ParamSpace, PulseTensor};
use crate::error::{PpgError, Result};
use crate::forward::Simulator;
use crate::rng;

/// Additive per-(receiver, channel) offset shared over time: `x_s = x_o - beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecModel {
    pub receivers: usize,
    pub channels: usize,
    pub beta: Vec<f64>,
}

impl MisspecModel {
    pub fn zeros(receivers: usize, channels: usize) -> Self {
        Self { receivers, channels, beta: vec![0.0; receivers * channels] }
    }

    /// Map an observation into simulator space.
    pub fn correct(&self, x_o: &PulseTensor) -> Result<PulseTensor> {
        if (x_o.receivers, x_o.channels) != (self.receivers, self.channels) {
            return Err(PpgError::Invalid(format!(
                "observation is {}x{}, correction is {}x{}",
                x_o.receivers, x_o.channels, self.receivers, self.channels
            )));
        }
        let mut out = x_o.clone();
        for (s, b) in out.values.chunks_mut(x_o.timesteps).zip(&self.beta) {
            s.iter_mut().for_each(|v| *v -= b);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaiConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub val_every: usize,
    /// Cap on validation observations scored at each check.
    pub max_val: usize,
    pub w_dc: f64,
    pub w_ac: f64,
    pub w_nac: f64,
    pub seed: u64,
}

impl HaiConfig {
    pub fn desk() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            lr: 1e-3,
            eta_min: 1e-5,
            weight_decay: 2.8e-8,
            val_fraction: 0.2,
            val_every: 20,
            max_val: 64,
            w_dc: 1.0,
            w_ac: 0.1,
            w_nac: 0.1,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            steps: 50_000,
            batch_size: 200,
            lr: 1e-4,
            eta_min: 1e-4,
            val_every: 100,
            max_val: usize::MAX,
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaiReport {
    pub train_loss: Vec<f64>,
    pub val_dc_mae: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_dc_mae: f64,
}

struct Fit<'a> {
    npe: &'a NpeModel,
    sim: &'a Simulator,
    beta: ParamId,
    config: &'a HaiConfig,
}

struct StepOut {
    loss: Var,
    parts: [Var; 3],
    dc_mae: Var,
}

impl Fit<'_> {
    /// Corrected signal `x_s = x_o - beta` against its reconstruction through
    /// encoder and simulator, compared in simulator space.
    fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&PulseTensor],
        norms: Option<[f64; 3]>,
    ) -> Result<StepOut> {
        let (_, _, t) = self.npe.shape();
        let x_o = g.input(stack_pulses(batch)?);
        let beta = g.param(store, self.beta);
        let beta_t = g.expand_last(beta, t);
        let neg = g.scale(beta_t, -1.0);
        let x_s = g.add_bcast(x_o, neg)?;
        let out = self.npe.forward(g, store, x_s)?;
        let x_hat = self.sim.forward_graph(g, out.statics, out.dynamics)?;

        let (dc_r, ac_r, nac_r) = raw_features(g, x_hat)?;
        let (dc_o, ac_o, nac_o) = raw_features(g, x_s)?;
        let l_dc = g.mse(dc_r, dc_o)?;
        let l_ac = g.mse(ac_r, ac_o)?;
        let l_nac = g.mse(nac_r, nac_o)?;
        let dc_mae = g.mae(dc_r, dc_o)?;
        let n = norms.unwrap_or_else(|| {
            let f = |v: Var| {
                let x = g.value(v).item();
                if x > 0.0 {
                    x
                } else {
                    1.0
                }
            };
            [f(l_dc), f(l_ac), f(l_nac)]
        });
        let c = &self.config;
        let a = g.scale(l_dc, c.w_dc / n[0]);
        let b = g.scale(l_ac, c.w_ac / n[1]);
        let d = g.scale(l_nac, c.w_nac / n[2]);
        let s = g.add(a, b)?;
        let loss = g.add(s, d)?;
        Ok(StepOut { loss, parts: [l_dc, l_ac, l_nac], dc_mae })
    }

    fn val_dc_mae(&self, store: &ParamStore, val: &[&PulseTensor]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in val.chunks(self.config.batch_size.max(1)) {
            let mut g = Graph::new();
            let o = self.build(&mut g, store, chunk, Some([1.0; 3]))?;
            total += g.value(o.dc_mae).item() * chunk.len() as f64;
        }
        Ok(total / val.len().max(1) as f64)
    }

    /// Optimize every trainable entry of `store`; keep the lowest validation
    /// DC error.
    fn run(&self, store: &mut ParamStore, obs: &[PulseTensor]) -> Result<HaiReport> {
        let c = self.config;
        if obs.len() < 2 {
            return Err(PpgError::Invalid("misspecification learning needs at least two observations".into()));
        }
        let mut rng = rng::stream(c.seed, "hai-split");
        let mut idx: Vec<usize> = (0..obs.len()).collect();
        idx.shuffle(&mut rng);
        let n_val = ((obs.len() as f64 * c.val_fraction).round() as usize).clamp(1, obs.len() - 1);
        let (val_idx, train_idx) = idx.split_at(n_val);
        let val: Vec<&PulseTensor> = val_idx.iter().take(c.max_val).map(|&i| &obs[i]).collect();
        let mut train: Vec<usize> = train_idx.to_vec();

        let mut opt = AdamW::new(c.lr, c.weight_decay);
        let mut norms = None;
        let mut cursor = train.len();
        let first = self.val_dc_mae(store, &val)?;
        let mut best = (first, 0usize, store.clone());
        let mut report = HaiReport {
            train_loss: Vec::with_capacity(c.steps),
            val_dc_mae: vec![(0, first)],
            best_step: 0,
            best_val_dc_mae: first,
        };
        for step in 0..c.steps {
            let mut batch = Vec::with_capacity(c.batch_size);
            while batch.len() < c.batch_size.min(train.len()) {
                if cursor == train.len() {
                    train.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&obs[train[cursor]]);
                cursor += 1;
            }
            let mut g = Graph::new();
            let o = self.build(&mut g, store, &batch, norms)?;
            if norms.is_none() {
                norms = Some(o.parts.map(|v| {
                    let x = g.value(v).item();
                    if x > 0.0 {
                        x
                    } else {
                        1.0
                    }
                }));
            }
            let lv = g.value(o.loss).item();
            if !lv.is_finite() {
                return Err(PpgError::Diverged(format!("reconstruction loss {lv} at step {step}")));
            }
            let grads = g.backward(o.loss);
            opt.lr = cosine_lr(step, c.lr, c.steps, c.eta_min);
            opt.step(store, &grads)?;
            report.train_loss.push(lv);
            if (step + 1) % c.val_every.max(1) == 0 || step + 1 == c.steps {
                let v = self.val_dc_mae(store, &val)?;
                report.val_dc_mae.push((step + 1, v));
                if v < best.0 {
                    best = (v, step + 1, store.clone());
                }
            }
        }
        *store = best.2;
        report.best_step = best.1;
        report.best_val_dc_mae = best.0;
        Ok(report)
    }
}

fn with_beta(npe: &NpeModel) -> (ParamStore, ParamId) {
    let (r, n, _) = npe.shape();
    let mut store = npe.params.clone();
    let id = store.add("misspec.beta", Tensor::zeros(&[r, n]));
    (store, id)
}

fn read_beta(store: &ParamStore, id: ParamId, npe: &NpeModel) -> MisspecModel {
    let (r, n, _) = npe.shape();
    MisspecModel { receivers: r, channels: n, beta: store.get(id).data().to_vec() }
}

/// Fit the offset with the pretrained encoder frozen.
pub fn learn_misspec(
    npe: &NpeModel,
    obs: &[PulseTensor],
    sim: &Simulator,
    config: &HaiConfig,
) -> Result<(MisspecModel, HaiReport)> {
    let (mut store, beta) = with_beta(npe);
    for id in npe.params.ids() {
        store.set_trainable(id, false);
    }
    let fit = Fit { npe, sim, beta, config };
    let report = fit.run(&mut store, obs)?;
    Ok((read_beta(&store, beta, npe), report))
}

/// Real-only baseline: encoder and offset trained jointly from scratch on
/// observations alone, feature moments taken from the observations.
pub fn train_real_only(
    space: &ParamSpace,
    obs: &[PulseTensor],
    sim: &Simulator,
    encoder: &EncoderConfig,
    config: &HaiConfig,
) -> Result<(NpeModel, MisspecModel, HaiReport)> {
    let norm = FeatureNorm::fit(obs)?;
    let mut npe = NpeModel::init(encoder, norm, space, rng::derive(config.seed, "real-only"))?;
    let (mut store, beta) = with_beta(&npe);
    let fit = Fit { npe: &npe, sim, beta, config };
    let report = fit.run(&mut store, obs)?;
    let misspec = read_beta(&store, beta, &npe);
    let mut params = npe.params.clone();
    params.load_values(&store)?;
    npe.params = params;
    Ok((npe, misspec, report))
}

/// Posterior per observation after removing the learned offset.
pub fn infer(obs: &[PulseTensor], npe: &NpeModel, misspec: &MisspecModel) -> Result<Vec<Posterior>> {
    let corrected = obs.iter().map(|x| misspec.correct(x)).collect::<Result<Vec<_>>>()?;
    npe.predict(&corrected)
}

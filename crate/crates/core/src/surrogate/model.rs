use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use ppgen_nn::{AdamW, Graph, Linear, ParamStore, Tensor, TensorFile, Var};

use super::lut::{Lut, LutBounds, LutRecord};
use crate::error::{PpgError, Result};
use crate::optics::N_LAYERS;
use crate::rng;

/// Absorption floor before the log transform.
pub const MU_A_FLOOR: f64 = 1e-8;
/// Detected-fraction floor before the log transform.
pub const FRACTION_FLOOR: f64 = 1e-30;
const N_IN: usize = N_LAYERS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    /// Batches used to estimate the standardization moments.
    pub norm_batches: usize,
    pub seed: u64,
}

impl SurrogateConfig {
    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            epochs: 40,
            batch_size: 1000,
            lr: 1e-3,
            val_fraction: 0.15,
            norm_batches: 10,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self { hidden: vec![100, 100, 100], epochs: 400, lr: 1e-4, ..Self::desk() }
    }
}

/// Evenly spaced held-out indices over `n` sorted scattering values.
pub fn validation_groups(n: usize, fraction: f64) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    (0..k).map(|i| (((i as f64 + 0.5) * n as f64 / k as f64).round() as usize).min(n - 1)).collect()
}

fn log_inputs(mu_a: &[f64; N_LAYERS], mu_s: f64) -> [f64; N_IN] {
    [mu_a[0].max(MU_A_FLOOR).ln(), mu_a[1].max(MU_A_FLOOR).ln(), mu_a[2].max(MU_A_FLOOR).ln(), mu_s]
}

fn log_outputs(f: &[f64]) -> impl Iterator<Item = f64> + '_ {
    f.iter().map(|v| v.max(FRACTION_FLOOR).ln())
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub hidden: Vec<usize>,
    pub n_out: usize,
    pub in_mean: [f64; N_IN],
    pub in_std: [f64; N_IN],
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
    pub bounds: LutBounds,
    layers: Vec<Linear>,
    params: ParamStore,
}

impl SurrogateModel {
    pub fn init(hidden: &[usize], n_out: usize, bounds: LutBounds, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "surrogate-init");
        let mut params = ParamStore::new();
        let mut widths = vec![N_IN];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut params, &format!("mlp.{i}"), w[0], w[1], &mut rng))
            .collect();
        Self {
            hidden: hidden.to_vec(),
            n_out,
            in_mean: [0.0; N_IN],
            in_std: [1.0; N_IN],
            out_mean: vec![0.0; n_out],
            out_std: vec![1.0; n_out],
            bounds,
            layers,
            params,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    fn standardize_inputs(&self, rows: impl Iterator<Item = [f64; N_IN]>) -> Vec<f64> {
        rows.flat_map(|x| {
            let mut z = [0.0; N_IN];
            for i in 0..N_IN {
                z[i] = (x[i] - self.in_mean[i]) / self.in_std[i];
            }
            z
        })
        .collect()
    }

    /// MLP on standardized inputs; standardized log outputs, row-major.
    fn mlp(&self, mut x: Vec<f64>, rows: usize) -> Vec<f64> {
        let mut buf = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&self.params, &x, rows, &mut buf);
            if i < last {
                buf.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut x, &mut buf);
        }
        x
    }

    /// Natural-log detected fractions for a batch of `(mu_a, mu_s)` inputs.
    pub fn predict_log_batch(&self, inputs: &[([f64; N_LAYERS], f64)]) -> Vec<f64> {
        let x = self.standardize_inputs(inputs.iter().map(|(a, s)| log_inputs(a, *s)));
        let mut y = self.mlp(x, inputs.len());
        for row in y.chunks_mut(self.n_out) {
            for ((v, m), s) in row.iter_mut().zip(&self.out_mean).zip(&self.out_std) {
                *v = *v * s + m;
            }
        }
        y
    }

    pub fn predict_batch(&self, inputs: &[([f64; N_LAYERS], f64)]) -> Vec<f64> {
        let mut y = self.predict_log_batch(inputs);
        y.iter_mut().for_each(|v| *v = v.exp());
        y
    }

    pub fn predict(&self, mu_a: &[f64; N_LAYERS], mu_s: f64) -> Vec<f64> {
        self.predict_batch(&[(*mu_a, mu_s)])
    }

    /// Same chain as [`predict_batch`](Self::predict_batch) on a graph:
    /// `x (M, 4)` raw `[mu_a1, mu_a2, mu_a3, mu_s]` to fractions `(M, n_out)`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = g.slice_axis1(x, 0, N_LAYERS)?;
        let a = g.clamp_min(a, MU_A_FLOOR);
        let a = g.ln(a);
        let s = g.slice_axis1(x, N_LAYERS, N_IN)?;
        let z = g.concat(&[a, s])?;
        let neg_mean = g.input(Tensor::new(&[N_IN], self.in_mean.iter().map(|m| -m).collect()));
        let inv_std = g.input(Tensor::new(&[N_IN], self.in_std.iter().map(|s| 1.0 / s).collect()));
        let z = g.add_bcast(z, neg_mean)?;
        let mut h = g.mul_bcast(z, inv_std)?;
        h = self.mlp_graph(g, h)?;
        let out_std = g.input(Tensor::new(&[self.n_out], self.out_std.clone()));
        let out_mean = g.input(Tensor::new(&[self.n_out], self.out_mean.clone()));
        let h = g.mul_bcast(h, out_std)?;
        let h = g.add_bcast(h, out_mean)?;
        Ok(g.exp(h))
    }

    fn mlp_graph(&self, g: &mut Graph, mut h: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &self.params, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Mean absolute natural-log error over every output of `records`.
    pub fn log_mae(&self, records: &[&LutRecord]) -> f64 {
        self.per_record_log_err(records).iter().sum::<f64>() / records.len().max(1) as f64
    }

    /// Mean absolute log error of each record over its outputs.
    pub fn per_record_log_err(&self, records: &[&LutRecord]) -> Vec<f64> {
        let inputs: Vec<_> = records.iter().map(|r| (r.mu_a, r.mu_s)).collect();
        let pred = self.predict_log_batch(&inputs);
        records
            .iter()
            .zip(pred.chunks(self.n_out))
            .map(|(r, p)| log_outputs(&r.fractions).zip(p).map(|(y, p)| (y - p).abs()).sum::<f64>() / self.n_out as f64)
            .collect()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let meta = serde_json::json!({
            "kind": "surrogate",
            "hidden": self.hidden,
            "n_out": self.n_out,
            "in_mean": self.in_mean,
            "in_std": self.in_std,
            "out_mean": self.out_mean,
            "out_std": self.out_std,
            "bounds": self.bounds,
        });
        TensorFile::from_params(meta, &self.params)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| PpgError::Invalid(format!("surrogate file: {what}"));
        let m = &f.meta;
        if m["kind"] != "surrogate" {
            return Err(bad("wrong kind"));
        }
        let field = |k: &str| m[k].clone();
        let hidden: Vec<usize> = serde_json::from_value(field("hidden")).map_err(|_| bad("hidden"))?;
        let n_out = m["n_out"].as_u64().ok_or_else(|| bad("n_out"))? as usize;
        let bounds: LutBounds = serde_json::from_value(field("bounds")).map_err(|_| bad("bounds"))?;
        let mut model = Self::init(&hidden, n_out, bounds, 0);
        model.in_mean = serde_json::from_value(field("in_mean")).map_err(|_| bad("in_mean"))?;
        model.in_std = serde_json::from_value(field("in_std")).map_err(|_| bad("in_std"))?;
        model.out_mean = serde_json::from_value(field("out_mean")).map_err(|_| bad("out_mean"))?;
        model.out_std = serde_json::from_value(field("out_std")).map_err(|_| bad("out_std"))?;
        model.params.load_values(&f.to_params())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub train_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub untrained_val_mae: f64,
    pub val_mu_s: Vec<f64>,
}

/// Column moments over the first `n_batches` shuffled training batches.
fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-12)).collect())
}

/// Train on the non-held-out scattering groups; keep the epoch with the lowest
/// validation log-MAE.
pub fn train_surrogate(lut: &Lut, config: &SurrogateConfig) -> Result<(SurrogateModel, SurrogateReport)> {
    let s = lut.config.sigmas.len();
    let base = lut.config.base_index()?;
    let n_out = lut.n_outputs();
    if lut.records.is_empty() || !lut.records.len().is_multiple_of(s) {
        return Err(PpgError::Invalid("LUT records do not form whole perturbation groups".into()));
    }
    let groups: Vec<&[LutRecord]> = lut.records.chunks(s).collect();
    if groups.iter().any(|g| g.iter().any(|r| r.group != g[0].group)) {
        return Err(PpgError::Invalid("LUT perturbation groups are not contiguous".into()));
    }

    let held: Vec<f64> =
        validation_groups(lut.mu_s_values.len(), config.val_fraction).into_iter().map(|i| lut.mu_s_values[i]).collect();
    let is_val = |g: &&[LutRecord]| held.iter().any(|m| m.to_bits() == g[0].mu_s.to_bits());
    let (val, mut train): (Vec<&[LutRecord]>, Vec<&[LutRecord]>) = groups.into_iter().partition(is_val);
    if train.is_empty() {
        return Err(PpgError::Invalid("no training groups left after the validation split".into()));
    }
    let val_records: Vec<&LutRecord> = val.iter().flat_map(|g| g.iter()).collect();

    let mut rng = rng::stream(config.seed, "surrogate-train");
    let groups_per_batch = (config.batch_size / s).max(1);

    let mut model = SurrogateModel::init(&config.hidden, n_out, lut.bounds, config.seed);
    train.shuffle(&mut rng);
    let sample: Vec<&LutRecord> =
        train.iter().take(groups_per_batch * config.norm_batches).flat_map(|g| g.iter()).collect();
    let (im, is) = moments(&sample.iter().map(|r| log_inputs(&r.mu_a, r.mu_s).to_vec()).collect::<Vec<_>>());
    let (om, os) = moments(&sample.iter().map(|r| log_outputs(&r.fractions).collect()).collect::<Vec<_>>());
    model.in_mean.copy_from_slice(&im);
    model.in_std.copy_from_slice(&is);
    model.out_mean = om;
    model.out_std = os;

    let score = |m: &SurrogateModel| if val_records.is_empty() { f64::NAN } else { m.log_mae(&val_records) };
    let untrained_val_mae = score(&model);

    // (S, S) map from a group's outputs to their differences from the base record
    let mut diff_w = vec![0.0; s * s];
    for j in 0..s {
        diff_w[j * s + j] += 1.0;
        diff_w[base * s + j] -= 1.0;
    }
    let diff_w = Tensor::new(&[s, s], diff_w);

    let mut opt = AdamW::adam(config.lr);
    let mut norm: Option<(f64, f64)> = None;
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_mae = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in train.chunks(groups_per_batch) {
            let gb = batch.len();
            let rows = gb * s;
            let recs = batch.iter().flat_map(|g| g.iter());
            let x = model.standardize_inputs(recs.clone().map(|r| log_inputs(&r.mu_a, r.mu_s)));
            let y: Vec<f64> = recs
                .flat_map(|r| {
                    log_outputs(&r.fractions)
                        .zip(model.out_mean.iter().zip(&model.out_std))
                        .map(|(v, (m, sd))| (v - m) / sd)
                        .collect::<Vec<_>>()
                })
                .collect();

            let mut g = Graph::new();
            let xv = g.input(Tensor::new(&[rows, N_IN], x));
            let yv = g.input(Tensor::new(&[rows, n_out], y));
            let pred = model.mlp_graph(&mut g, xv)?;
            let amp = g.mae(pred, yv)?;

            let dw = g.input(diff_w.clone());
            let to_groups = |g: &mut Graph, v: Var| -> Result<Var> {
                let v = g.reshape(v, &[gb, s, n_out])?;
                let v = g.permute(v, &[0, 2, 1])?;
                let v = g.reshape(v, &[gb * n_out, s])?;
                Ok(g.dense(v, dw, None)?)
            };
            let pd = to_groups(&mut g, pred)?;
            let yd = to_groups(&mut g, yv)?;
            let diff = g.mae(pd, yd)?;

            let (a0, d0) = *norm.get_or_insert_with(|| {
                let a = g.value(amp).item();
                let d = g.value(diff).item();
                (if a > 0.0 { a } else { 1.0 }, if d > 0.0 { d } else { 1.0 })
            });
            let amp_n = g.scale(amp, 1.0 / a0);
            let diff_n = g.scale(diff, 1.0 / d0);
            let loss = g.add(amp_n, diff_n)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(PpgError::Diverged(format!("surrogate loss {lv} at epoch {epoch}")));
            }
            let grads = g.backward(loss);
            opt.step(&mut model.params, &grads)?;
            epoch_loss += lv;
            n_batches += 1;
        }
        train_loss.push(epoch_loss / n_batches as f64);
        let v = score(&model);
        val_mae.push(v);
        if v < best.0 || (v.is_nan() && epoch + 1 == config.epochs) {
            best = (v, epoch, model.params.clone());
        }
    }
    if config.epochs > 0 {
        model.params = best.2;
    }
    let report = SurrogateReport {
        train_loss,
        val_mae,
        best_epoch: best.1,
        best_val_mae: if config.epochs > 0 { best.0 } else { untrained_val_mae },
        untrained_val_mae,
        val_mu_s: held,
    };
    Ok((model, report))
}

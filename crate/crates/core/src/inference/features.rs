use serde::{Deserialize, Serialize};

use ppgen_nn::{Graph, Tensor, Var};

use crate::domain::PulseTensor;
use crate::error::{PpgError, Result};
use crate::sensor::extract_features;

/// DC floor before the log transform.
pub const DC_FLOOR: f64 = 1e-12;

/// Per-channel moments of log-DC, AC and nAC used to standardize encoder inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub receivers: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub ldc_mean: Vec<f64>,
    pub ldc_std: Vec<f64>,
    pub ac_std: Vec<f64>,
    pub nac_std: Vec<f64>,
}

fn std_floor(v: f64) -> f64 {
    v.sqrt().max(1e-12)
}

impl FeatureNorm {
    pub fn fit(pulses: &[PulseTensor]) -> Result<Self> {
        let first = pulses.first().ok_or_else(|| PpgError::Invalid("no pulses to fit feature moments".into()))?;
        let (r, n, t) = (first.receivers, first.channels, first.timesteps);
        let rn = r * n;
        let m = pulses.len() as f64;
        let mut ldc_sum = vec![0.0; rn];
        let mut ldc_sq = vec![0.0; rn];
        let mut ac_sq = vec![0.0; rn];
        let mut nac_sq = vec![0.0; rn];
        for p in pulses {
            if (p.receivers, p.channels, p.timesteps) != (r, n, t) {
                return Err(PpgError::Invalid("pulses differ in shape".into()));
            }
            let f = extract_features(p)?;
            for c in 0..rn {
                let l = f.dc[c].max(DC_FLOOR).ln();
                ldc_sum[c] += l;
                ldc_sq[c] += l * l;
                ac_sq[c] += f.ac[c * t..(c + 1) * t].iter().map(|v| v * v).sum::<f64>() / t as f64;
                nac_sq[c] += f.nac[c * t..(c + 1) * t].iter().map(|v| v * v).sum::<f64>() / t as f64;
            }
        }
        let ldc_mean: Vec<f64> = ldc_sum.iter().map(|s| s / m).collect();
        let ldc_std = ldc_sq.iter().zip(&ldc_mean).map(|(q, mu)| std_floor((q / m - mu * mu).max(0.0))).collect();
        // AC and nAC are zero-mean by construction
        Ok(Self {
            receivers: r,
            channels: n,
            timesteps: t,
            ldc_mean,
            ldc_std,
            ac_std: ac_sq.iter().map(|q| std_floor(q / m)).collect(),
            nac_std: nac_sq.iter().map(|q| std_floor(q / m)).collect(),
        })
    }

    pub fn in_channels(&self) -> usize {
        3 * self.receivers * self.channels
    }

    fn per_channel(&self, g: &mut Graph, v: impl Iterator<Item = f64>, over_time: bool) -> Var {
        let (r, n, t) = (self.receivers, self.channels, self.timesteps);
        if over_time {
            let data: Vec<f64> = v.flat_map(|x| std::iter::repeat_n(x, t)).collect();
            g.input(Tensor::new(&[r, n, t], data))
        } else {
            g.input(Tensor::new(&[r, n], v.collect()))
        }
    }

    /// `x (B, R, N, T)` to standardized `[log-DC, AC, nAC]` stacked as `(B, 3RN, T)`.
    pub fn graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (r, n, t) = (self.receivers, self.channels, self.timesteps);
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != [r, n, t] {
            return Err(PpgError::Invalid(format!("features expect (B, {r}, {n}, {t}), got {xs:?}")));
        }
        let b = xs[0];
        let dc = g.mean_last(x);
        let dcx = g.expand_last(dc, t);
        let ac = g.sub(x, dcx)?;
        let nac = g.div(ac, dcx)?;

        let ldc = g.clamp_min(dc, DC_FLOOR);
        let ldc = g.ln(ldc);
        let neg_mean = self.per_channel(g, self.ldc_mean.iter().map(|m| -m), false);
        let inv = self.per_channel(g, self.ldc_std.iter().map(|s| 1.0 / s), false);
        let ldc = g.add_bcast(ldc, neg_mean)?;
        let ldc = g.mul_bcast(ldc, inv)?;
        let ldc = g.expand_last(ldc, t);

        let inv_ac = self.per_channel(g, self.ac_std.iter().map(|s| 1.0 / s), true);
        let ac = g.mul_bcast(ac, inv_ac)?;
        let inv_nac = self.per_channel(g, self.nac_std.iter().map(|s| 1.0 / s), true);
        let nac = g.mul_bcast(nac, inv_nac)?;

        let parts = [ldc, ac, nac]
            .into_iter()
            .map(|v| g.reshape(v, &[b, r * n, t]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(g.concat(&parts)?)
    }
}

/// Raw (unstandardized) DC `(B, R, N)`, AC and nAC `(B, R, N, T)` on a graph.
pub fn raw_features(g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
    let t = *g.shape(x).last().ok_or_else(|| PpgError::Invalid("scalar pulse".into()))?;
    let dc = g.mean_last(x);
    let dcx = g.expand_last(dc, t);
    let ac = g.sub(x, dcx)?;
    let nac = g.div(ac, dcx)?;
    Ok((dc, ac, nac))
}

/// Stack pulses into a `(B, R, N, T)` tensor.
pub fn stack_pulses(pulses: &[&PulseTensor]) -> Result<Tensor> {
    let first = pulses.first().ok_or_else(|| PpgError::Invalid("empty batch".into()))?;
    let shape = [pulses.len(), first.receivers, first.channels, first.timesteps];
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in pulses {
        if (p.receivers, p.channels, p.timesteps) != (shape[1], shape[2], shape[3]) {
            return Err(PpgError::Invalid("pulses differ in shape".into()));
        }
        data.extend_from_slice(&p.values);
    }
    Ok(Tensor::new(&shape, data))
}

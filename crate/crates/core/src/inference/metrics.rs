use serde::{Deserialize, Serialize};

use crate::domain::{BioParams, DYNAMIC_NAMES, N_STATIC, STATIC_NAMES};
use crate::error::{PpgError, Result};

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean absolute percentage error; `None` if any truth value is zero.
pub fn mape(est: &[f64], truth: &[f64]) -> Option<f64> {
    if est.len() != truth.len() || est.is_empty() || truth.contains(&0.0) {
        return None;
    }
    Some(100.0 * est.iter().zip(truth).map(|(e, t)| ((e - t) / t).abs()).sum::<f64>() / est.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticScore {
    pub name: String,
    pub pearson: Option<f64>,
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicScore {
    pub name: String,
    /// Mean over pulses of the across-time correlation.
    pub mean_corr: Option<f64>,
    /// Per-pulse across-time correlation (absent for flat series).
    pub per_pulse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub statics: Vec<StaticScore>,
    pub dynamics: Vec<DynamicScore>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = v.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    /// Average correlation over every parameter with a defined score.
    pub fn macro_corr(&self) -> Option<f64> {
        mean_defined(self.statics.iter().map(|s| s.pearson).chain(self.dynamics.iter().map(|d| d.mean_corr)))
    }

    pub fn macro_mape(&self) -> Option<f64> {
        mean_defined(self.statics.iter().map(|s| s.mape))
    }

    pub fn static_corr(&self, name: &str) -> Option<f64> {
        self.statics.iter().find(|s| s.name == name).and_then(|s| s.pearson)
    }

    pub fn static_mape(&self, name: &str) -> Option<f64> {
        self.statics.iter().find(|s| s.name == name).and_then(|s| s.mape)
    }
}

pub fn evaluate(estimates: &[BioParams], truth: &[BioParams]) -> Result<EvalReport> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(PpgError::Invalid(format!(
            "evaluation needs matched non-empty sets, got {} estimates and {} truths",
            estimates.len(),
            truth.len()
        )));
    }
    let statics = (0..N_STATIC)
        .map(|i| {
            let e: Vec<f64> = estimates.iter().map(|b| b.statics.0[i]).collect();
            let t: Vec<f64> = truth.iter().map(|b| b.statics.0[i]).collect();
            StaticScore { name: STATIC_NAMES[i].to_string(), pearson: pearson(&e, &t), mape: mape(&e, &t) }
        })
        .collect();
    let dynamics = DYNAMIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let per_pulse: Vec<Option<f64>> = estimates
                .iter()
                .zip(truth)
                .map(|(e, t)| if k == 0 { pearson(&e.dbv2, &t.dbv2) } else { pearson(&e.dbv3, &t.dbv3) })
                .collect();
            DynamicScore { name: name.to_string(), mean_corr: mean_defined(per_pulse.iter().copied()), per_pulse }
        })
        .collect();
    Ok(EvalReport { n: truth.len(), statics, dynamics })
}

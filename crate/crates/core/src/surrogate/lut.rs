use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ppgen_nn::{Tensor, TensorFile};

use crate::domain::{ParamSpace, N_PARAMS};
use crate::error::{PpgError, Result};
use crate::optics::{self, SkinModel, Spectra, N_LAYERS};
use crate::rng;
use crate::sampling::{latin_hypercube, Sobol};
use crate::transport::{LutSimulator, SlabGeometry};

/// Multiplier standard deviations applied to each base absorption triple.
pub const PERTURBATION_SIGMAS: [f64; 6] = [1e-5, 1e-4, 1e-3, 1e-2, 0.1, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutConfig {
    pub n_mu_s: usize,
    pub sobol: usize,
    /// Points in each of the two Latin hypercube designs.
    pub lhs: usize,
    pub sigmas: Vec<f64>,
    pub n_photons: u64,
    pub seed: u64,
    pub geometry: SlabGeometry,
    pub g: f64,
}

impl LutConfig {
    pub fn desk() -> Self {
        Self {
            n_mu_s: 8,
            sobol: 200,
            lhs: 150,
            sigmas: PERTURBATION_SIGMAS.to_vec(),
            n_photons: 100_000,
            seed: 0,
            geometry: SlabGeometry::default(),
            g: 0.9,
        }
    }

    pub fn paper() -> Self {
        Self { n_mu_s: 35, sobol: 10_000, lhs: 10_000, n_photons: 1_000_000, ..Self::desk() }
    }

    pub fn for_skin(mut self, skin: &SkinModel) -> Self {
        self.geometry = self.geometry.with_thickness(skin.thicknesses());
        self.g = skin.g;
        self
    }

    pub fn base_points(&self) -> usize {
        self.sobol + 2 * self.lhs
    }

    pub fn n_records(&self) -> usize {
        self.n_mu_s * self.base_points() * self.sigmas.len()
    }

    pub fn base_index(&self) -> Result<usize> {
        self.sigmas
            .iter()
            .position(|s| *s == 0.0)
            .ok_or_else(|| PpgError::Config("perturbation list needs a 0.0 entry for the base record".into()))
    }

    pub fn simulator(&self) -> LutSimulator {
        LutSimulator::new(self.geometry.clone(), self.g, self.n_photons, rng::derive(self.seed, "mc"))
    }
}

/// Natural-log bounds of each layer's absorption and linear bounds of scattering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutBounds {
    pub log_mu_a: [(f64, f64); N_LAYERS],
    pub mu_s: (f64, f64),
}

impl LutBounds {
    pub fn mu_s_grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.mu_s;
        if n == 1 {
            return vec![(lo * hi).sqrt()];
        }
        (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
    }

    pub fn contains(&self, mu_a: &[f64; N_LAYERS], mu_s: f64) -> bool {
        let tol = 1e-9;
        mu_a.iter().zip(&self.log_mu_a).all(|(m, (lo, hi))| *m > 0.0 && m.ln() >= lo - tol && m.ln() <= hi + tol)
            && mu_s >= self.mu_s.0 * (1.0 - tol)
            && mu_s <= self.mu_s.1 * (1.0 + tol)
    }
}

/// Extremes of the tissue model over every corner of the parameter box and
/// every grid wavelength in `lambda_range`.
pub fn lut_bounds(
    space: &ParamSpace,
    spectra: &Spectra,
    model: &SkinModel,
    lambda_range: (f64, f64),
    lambda_step: f64,
) -> Result<LutBounds> {
    let ranges: Vec<(f64, f64)> = space.statics.iter().chain(&space.dynamics).map(|r| (r.lo, r.hi)).collect();
    debug_assert_eq!(ranges.len(), N_PARAMS);
    let n_lambda = ((lambda_range.1 - lambda_range.0) / lambda_step).round() as usize + 1;
    let mut lo = [f64::INFINITY; N_LAYERS + 1];
    let mut hi = [f64::NEG_INFINITY; N_LAYERS + 1];
    let mut theta = [0.0; N_PARAMS];
    for li in 0..n_lambda {
        let lambda = (lambda_range.0 + li as f64 * lambda_step).min(lambda_range.1);
        for corner in 0..1u32 << N_PARAMS {
            for (i, (t, r)) in theta.iter_mut().zip(&ranges).enumerate() {
                *t = if corner >> i & 1 == 1 { r.1 } else { r.0 };
            }
            let p = optics::f_b(&theta, lambda, spectra, model)?;
            for (k, v) in p.mu_a.iter().chain(std::iter::once(&p.mu_s)).enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
    }
    let mut log_mu_a = [(0.0, 0.0); N_LAYERS];
    for l in 0..N_LAYERS {
        if !(lo[l] > 0.0) {
            return Err(PpgError::Invalid(format!("layer {l} absorption bound {} is not positive", lo[l])));
        }
        log_mu_a[l] = (lo[l].ln(), hi[l].ln());
    }
    let b = LutBounds { log_mu_a, mu_s: (lo[N_LAYERS], hi[N_LAYERS]) };
    b.check()?;
    Ok(b)
}

impl LutBounds {
    pub fn check(&self) -> Result<()> {
        let bad = self.log_mu_a.iter().chain(std::iter::once(&self.mu_s)).any(|(lo, hi)| !(lo < hi));
        if bad {
            return Err(PpgError::Invalid(format!("inverted LUT bounds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    Sobol,
    Lhs1,
    Lhs2,
}

impl Design {
    fn code(self) -> f64 {
        self as u8 as f64
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as u8 {
            0 => Some(Self::Sobol),
            1 => Some(Self::Lhs1),
            2 => Some(Self::Lhs2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutRecord {
    pub mu_a: [f64; N_LAYERS],
    pub mu_s: f64,
    pub fractions: Vec<f64>,
    pub design: Design,
    /// Index into the perturbation list.
    pub perturbation: u8,
    /// Base point this record derives from; a group's records are contiguous.
    pub group: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    pub config: LutConfig,
    pub bounds: LutBounds,
    pub mu_s_values: Vec<f64>,
    pub records: Vec<LutRecord>,
}

/// Unit-cube base designs for one scattering value.
fn base_designs(config: &LutConfig, rng: &mut impl Rng) -> Result<Vec<(Design, Vec<f64>)>> {
    let mut out = Vec::with_capacity(config.base_points());
    let sobol = Sobol::new(N_LAYERS)?.with_random_shift(rng);
    out.extend(sobol.points(config.sobol).into_iter().map(|p| (Design::Sobol, p)));
    for design in [Design::Lhs1, Design::Lhs2] {
        out.extend(latin_hypercube(config.lhs, N_LAYERS, rng).into_iter().map(|p| (design, p)));
    }
    Ok(out)
}

/// Sample the absorption space for every prepared scattering value and score
/// each point by reweighting the cached scatter-only runs.
pub fn build_lut(config: &LutConfig, bounds: LutBounds, sim: &LutSimulator) -> Result<Lut> {
    bounds.check()?;
    config.base_index()?;
    if config.sigmas.len() > u8::MAX as usize {
        return Err(PpgError::Config("too many perturbation levels".into()));
    }
    let mu_s_values = bounds.mu_s_grid(config.n_mu_s);
    let root = rng::derive(config.seed, "lut");
    let per_mu_s: Vec<Vec<LutRecord>> = mu_s_values
        .par_iter()
        .enumerate()
        .map(|(i, &mu_s)| {
            let run = sim.run(mu_s)?;
            let mut rng = rng::indexed(root, i as u64);
            let designs = base_designs(config, &mut rng)?;
            let mut out = Vec::with_capacity(designs.len() * config.sigmas.len());
            for (j, (design, u)) in designs.into_iter().enumerate() {
                let group = (i * config.base_points() + j) as u32;
                let mut base = [0.0; N_LAYERS];
                for l in 0..N_LAYERS {
                    let (lo, hi) = bounds.log_mu_a[l];
                    base[l] = (lo + u[l] * (hi - lo)).exp();
                }
                for (p, &sigma) in config.sigmas.iter().enumerate() {
                    let mut mu_a = base;
                    for m in &mut mu_a {
                        let z: f64 = rng.sample(StandardNormal);
                        *m *= (1.0 + sigma * z).max(0.0);
                    }
                    let reading = run.apply_absorption(&mu_a)?;
                    out.push(LutRecord {
                        mu_a,
                        mu_s,
                        fractions: reading.fractions,
                        design,
                        perturbation: p as u8,
                        group,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Lut { config: config.clone(), bounds, mu_s_values, records: per_mu_s.into_iter().flatten().collect() })
}

const RECORD_FIXED: usize = N_LAYERS + 1 + 3;

impl Lut {
    pub fn n_outputs(&self) -> usize {
        self.records.first().map_or(0, |r| r.fractions.len())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let r = self.n_outputs();
        let meta = serde_json::json!({
            "kind": "lut",
            "config": self.config,
            "bounds": self.bounds,
            "mu_s_values": self.mu_s_values,
            "n_outputs": r,
        });
        let mut data = Vec::with_capacity(self.records.len() * (RECORD_FIXED + r));
        for rec in &self.records {
            data.extend_from_slice(&rec.mu_a);
            data.push(rec.mu_s);
            data.extend_from_slice(&rec.fractions);
            data.extend_from_slice(&[rec.design.code(), rec.perturbation as f64, rec.group as f64]);
        }
        let mut f = TensorFile::new(meta);
        f.push("records", Tensor::new(&[self.records.len(), RECORD_FIXED + r], data));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| PpgError::Invalid(format!("LUT file: {what}"));
        let m = &f.meta;
        if m["kind"] != "lut" {
            return Err(bad("wrong kind"));
        }
        let config: LutConfig = serde_json::from_value(m["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let bounds: LutBounds = serde_json::from_value(m["bounds"].clone()).map_err(|e| bad(&e.to_string()))?;
        let mu_s_values: Vec<f64> =
            serde_json::from_value(m["mu_s_values"].clone()).map_err(|e| bad(&e.to_string()))?;
        let r = m["n_outputs"].as_u64().ok_or_else(|| bad("n_outputs"))? as usize;
        let t = f.get("records")?;
        if t.shape() != [t.shape()[0], RECORD_FIXED + r] {
            return Err(bad("records shape"));
        }
        let records = t
            .data()
            .chunks_exact(RECORD_FIXED + r)
            .map(|c| {
                Ok(LutRecord {
                    mu_a: [c[0], c[1], c[2]],
                    mu_s: c[3],
                    fractions: c[4..4 + r].to_vec(),
                    design: Design::from_code(c[4 + r]).ok_or_else(|| bad("design code"))?,
                    perturbation: c[5 + r] as u8,
                    group: c[6 + r] as u32,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, bounds, mu_s_values, records })
    }
}

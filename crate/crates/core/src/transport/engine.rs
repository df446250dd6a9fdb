use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reading_from_sums, DetectorReading, PhotonRecord, ScatterRun, SlabGeometry};
use crate::error::{PpgError, Result};
use crate::optics::N_LAYERS;

const CHUNK: u64 = 2048;
const ROULETTE_THRESHOLD: f64 = 1e-4;
const ROULETTE_SURVIVAL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// No absorption in flight; detected photons keep their per-layer paths.
    ScatterOnly,
    /// Weight deposition at each interaction with Russian roulette.
    Absorbing { mu_a: [f64; N_LAYERS] },
}

/// Where launched weight ended up. `roulette` is the net weight created by
/// roulette survivors minus the weight of killed photons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub specular: f64,
    pub detected: Vec<f64>,
    pub top_other: f64,
    pub bottom: f64,
    pub cutoff: f64,
    pub absorbed: f64,
    pub roulette: f64,
}

impl Tally {
    fn zeros(n_det: usize) -> Self {
        Self { detected: vec![0.0; n_det], ..Default::default() }
    }

    fn merge(&mut self, o: &Tally) {
        self.specular += o.specular;
        for (a, b) in self.detected.iter_mut().zip(&o.detected) {
            *a += b;
        }
        self.top_other += o.top_other;
        self.bottom += o.bottom;
        self.cutoff += o.cutoff;
        self.absorbed += o.absorbed;
        self.roulette += o.roulette;
    }

    /// Total accounted weight, net of roulette.
    pub fn total(&self) -> f64 {
        self.specular + self.detected.iter().sum::<f64>() + self.top_other + self.bottom + self.cutoff + self.absorbed
            - self.roulette
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutput {
    pub n_photons: u64,
    pub tally: Tally,
    pub records: Vec<PhotonRecord>,
    det_sumsq: Vec<f64>,
    bottom_sumsq: f64,
}

impl TraceOutput {
    fn empty(n_det: usize) -> Self {
        Self {
            n_photons: 0,
            tally: Tally::zeros(n_det),
            records: Vec::new(),
            det_sumsq: vec![0.0; n_det],
            bottom_sumsq: 0.0,
        }
    }

    fn merge(&mut self, mut o: TraceOutput) {
        self.n_photons += o.n_photons;
        self.tally.merge(&o.tally);
        self.records.append(&mut o.records);
        for (a, b) in self.det_sumsq.iter_mut().zip(&o.det_sumsq) {
            *a += b;
        }
        self.bottom_sumsq += o.bottom_sumsq;
    }

    pub fn reading(&self) -> DetectorReading {
        reading_from_sums(&self.tally.detected, &self.det_sumsq, self.n_photons)
    }

    /// Fraction leaving through the bottom and its standard error.
    pub fn transmission(&self) -> (f64, f64) {
        let r = reading_from_sums(&[self.tally.bottom], &[self.bottom_sumsq], self.n_photons);
        (r.fractions[0], r.std_errors[0])
    }

    pub fn into_scatter_run(self, mu_s: f64, g: f64) -> ScatterRun {
        ScatterRun {
            mu_s,
            g,
            n_photons: self.n_photons,
            n_detectors: self.tally.detected.len(),
            records: self.records,
            tally: self.tally,
        }
    }
}

/// Unpolarized Fresnel reflectance going from index `n1` into `n2`.
pub fn fresnel_reflectance(n1: f64, n2: f64, cos_i: f64) -> f64 {
    if (n1 - n2).abs() < 1e-12 {
        return 0.0;
    }
    let cos_i = cos_i.clamp(0.0, 1.0);
    if cos_i > 1.0 - 1e-12 {
        let r = (n1 - n2) / (n1 + n2);
        return r * r;
    }
    let sin_t = n1 / n2 * (1.0 - cos_i * cos_i).sqrt();
    if sin_t >= 1.0 {
        return 1.0;
    }
    let cos_t = (1.0 - sin_t * sin_t).sqrt();
    let rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t);
    let rp = (n1 * cos_t - n2 * cos_i) / (n1 * cos_t + n2 * cos_i);
    0.5 * (rs * rs + rp * rp)
}

/// Henyey-Greenstein deflection cosine from a uniform draw in [0, 1).
pub fn sample_hg_cos(g: f64, u: f64) -> f64 {
    if g.abs() < 1e-9 {
        return 2.0 * u - 1.0;
    }
    let t = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
    ((1.0 + g * g - t * t) / (2.0 * g)).clamp(-1.0, 1.0)
}

fn scatter(dir: &mut [f64; 3], g: f64, rng: &mut ChaCha8Rng) {
    let cos_t = sample_hg_cos(g, rng.random());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let (sin_p, cos_p) = phi.sin_cos();
    let [ux, uy, uz] = *dir;
    if uz.abs() > 0.99999 {
        *dir = [sin_t * cos_p, sin_t * sin_p, uz.signum() * cos_t];
    } else {
        let tmp = (1.0 - uz * uz).sqrt();
        *dir = [
            sin_t * (ux * uz * cos_p - uy * sin_p) / tmp + ux * cos_t,
            sin_t * (uy * uz * cos_p + ux * sin_p) / tmp + uy * cos_t,
            -sin_t * cos_p * tmp + uz * cos_t,
        ];
    }
}

fn optical_depth(rng: &mut ChaCha8Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

struct Ctx<'a> {
    geom: &'a SlabGeometry,
    bounds: [f64; N_LAYERS + 1],
    mu_a: [f64; N_LAYERS],
    mu_s: f64,
    g: f64,
    record: bool,
    roulette: bool,
    base: ChaCha8Rng,
}

impl Ctx<'_> {
    fn trace(&self, index: u64, out: &mut TraceOutput) {
        let mut rng = self.base.clone();
        rng.set_stream(index);
        let geom = self.geom;
        let rsp = fresnel_reflectance(geom.n_ambient, geom.n_tissue, 1.0);
        let tally = &mut out.tally;
        tally.specular += rsp;
        let mut w = 1.0 - rsp;

        let r0 = 0.5 * geom.source_diameter * rng.random::<f64>().sqrt();
        let phi0 = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let mut pos = [r0 * phi0.cos(), r0 * phi0.sin(), 0.0];
        let mut dir = [0.0, 0.0, 1.0];
        let mut layer = 0usize;
        let mut paths = [0.0; N_LAYERS];
        let mut total = 0.0;
        let mut tau = optical_depth(&mut rng);

        loop {
            let mu_t = self.mu_a[layer] + self.mu_s;
            let uz = dir[2];
            let d_bound = if uz > 0.0 {
                (self.bounds[layer + 1] - pos[2]) / uz
            } else if uz < 0.0 {
                (self.bounds[layer] - pos[2]) / uz
            } else {
                f64::INFINITY
            };
            let d_int = if mu_t > 0.0 { tau / mu_t } else { f64::INFINITY };
            let hit = d_bound <= d_int;
            let step = if hit { d_bound } else { d_int };

            if total + step > geom.path_cutoff {
                tally.cutoff += w;
                return;
            }
            for (p, u) in pos.iter_mut().zip(dir) {
                *p += u * step;
            }
            paths[layer] += step;
            total += step;

            if hit {
                tau = (tau - mu_t * step).max(0.0);
                if uz > 0.0 {
                    if layer + 1 == N_LAYERS {
                        tally.bottom += w;
                        out.bottom_sumsq += w * w;
                        return;
                    }
                    layer += 1;
                    pos[2] = self.bounds[layer];
                } else if layer > 0 {
                    layer -= 1;
                    pos[2] = self.bounds[layer + 1];
                } else {
                    pos[2] = 0.0;
                    let r = fresnel_reflectance(geom.n_tissue, geom.n_ambient, -uz);
                    if r > 0.0 && rng.random::<f64>() < r {
                        dir[2] = -uz;
                        tau = optical_depth(&mut rng);
                        continue;
                    }
                    match geom.detector_at(pos[0], pos[1]) {
                        Some(d) => {
                            tally.detected[d] += w;
                            out.det_sumsq[d] += w * w;
                            if self.record {
                                out.records.push(PhotonRecord { detector: d as u8, paths, weight: w });
                            }
                        }
                        None => tally.top_other += w,
                    }
                    return;
                }
                continue;
            }

            tau = optical_depth(&mut rng);
            let mu_a = self.mu_a[layer];
            if mu_a > 0.0 {
                let dw = w * mu_a / mu_t;
                tally.absorbed += dw;
                w -= dw;
            }
            if self.mu_s > 0.0 {
                scatter(&mut dir, self.g, &mut rng);
            }
            if self.roulette && w < ROULETTE_THRESHOLD {
                if w > 0.0 && rng.random::<f64>() < ROULETTE_SURVIVAL {
                    let boosted = w / ROULETTE_SURVIVAL;
                    tally.roulette += boosted - w;
                    w = boosted;
                } else {
                    tally.roulette -= w;
                    return;
                }
            }
        }
    }
}

/// Trace `n_photons` photons launched at normal incidence from the source disc.
///
/// Each photon draws from its own ChaCha stream, and chunks are merged in
/// order, so results are identical for any thread count.
pub fn simulate(geom: &SlabGeometry, mu_s: f64, g: f64, mode: Mode, n_photons: u64, seed: u64) -> Result<TraceOutput> {
    geom.validate()?;
    if !(mu_s >= 0.0 && mu_s.is_finite()) {
        return Err(PpgError::Invalid(format!("scattering coefficient must be finite and >= 0, got {mu_s}")));
    }
    if !(g > -1.0 && g < 1.0) {
        return Err(PpgError::Invalid(format!("anisotropy must lie in (-1, 1), got {g}")));
    }
    let (mu_a, record, roulette) = match mode {
        Mode::ScatterOnly => ([0.0; N_LAYERS], true, false),
        Mode::Absorbing { mu_a } => {
            if mu_a.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                return Err(PpgError::Invalid(format!("absorption must be finite and >= 0, got {mu_a:?}")));
            }
            (mu_a, false, true)
        }
    };
    let t = geom.thickness;
    let ctx = Ctx {
        geom,
        bounds: [0.0, t[0], t[0] + t[1], t[0] + t[1] + t[2]],
        mu_a,
        mu_s,
        g,
        record,
        roulette,
        base: ChaCha8Rng::seed_from_u64(seed),
    };
    let n_det = geom.n_detectors();
    let n_chunks = n_photons.div_ceil(CHUNK);
    let parts: Vec<TraceOutput> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut out = TraceOutput::empty(n_det);
            let end = ((c + 1) * CHUNK).min(n_photons);
            for i in c * CHUNK..end {
                ctx.trace(i, &mut out);
            }
            out.n_photons = end - c * CHUNK;
            out
        })
        .collect();
    let mut out = TraceOutput::empty(n_det);
    for p in parts {
        out.merge(p);
    }
    Ok(out)
}

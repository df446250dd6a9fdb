//! Arterial pressure templates and the two-compartment Windkessel model that
//! turns them into dermis/subcutis blood-volume waveforms.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PpgError, Result};

/// One cardiac cycle of arterial pressure sampled at `sample_rate` Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureWave {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// Allowed mismatch between first and last sample, relative to peak-to-peak.
pub const PERIODICITY_TOL: f64 = 0.05;

impl PressureWave {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(PpgError::Invalid("pressure wave needs at least 2 samples".into()));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(PpgError::Invalid(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(PpgError::NonFinite("pressure wave"));
        }
        let (lo, hi) = min_max(&self.samples);
        let gap = (self.samples[0] - self.samples[self.samples.len() - 1]).abs();
        if hi > lo && gap > PERIODICITY_TOL * (hi - lo) {
            return Err(PpgError::Invalid(format!(
                "pressure wave not periodic: |P[0] - P[T-1]| = {gap:.4} exceeds {}% of range {:.4}",
                PERIODICITY_TOL * 100.0,
                hi - lo
            )));
        }
        Ok(())
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Gaussian bump on the unit cycle, wrapped so the template is periodic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Lobe {
    fn eval(&self, phase: f64) -> f64 {
        (-1..=1)
            .map(|k| {
                let d = (phase - self.center + k as f64) / self.width;
                (-0.5 * d * d).exp()
            })
            .sum::<f64>()
            * self.amplitude
    }
}

/// Diastolic baseline plus systolic, reflected and dicrotic lobes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureTemplate {
    pub diastolic: f64,
    pub lobes: Vec<Lobe>,
}

impl PressureTemplate {
    /// Randomized template; amplitudes in mmHg above a diastolic baseline.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let c1 = rng.random_range(0.15..0.22);
        let a1 = rng.random_range(30.0..50.0);
        let systolic = Lobe { amplitude: a1, center: c1, width: rng.random_range(0.035..0.05) };
        let reflected = Lobe {
            amplitude: a1 * rng.random_range(0.2..0.45),
            center: c1 + rng.random_range(0.06..0.10),
            width: rng.random_range(0.05..0.07),
        };
        let dicrotic = Lobe {
            amplitude: a1 * rng.random_range(0.0..0.25),
            center: rng.random_range(0.45..0.6),
            width: rng.random_range(0.03..0.06),
        };
        Self { diastolic: rng.random_range(65.0..90.0), lobes: vec![systolic, reflected, dicrotic] }
    }

    pub fn render(&self, t: usize, heart_rate: f64) -> Result<PressureWave> {
        if t < 16 {
            return Err(PpgError::Invalid(format!("pressure template needs T >= 16, got {t}")));
        }
        if !(heart_rate > 0.0) {
            return Err(PpgError::Invalid(format!("heart rate {heart_rate} must be positive")));
        }
        let samples = (0..t)
            .map(|k| {
                let phase = k as f64 / t as f64;
                self.diastolic + self.lobes.iter().map(|l| l.eval(phase)).sum::<f64>()
            })
            .collect();
        // one cycle spans 60/HR seconds over T samples
        PressureWave::new(samples, t as f64 * heart_rate / 60.0)
    }
}

pub fn synth_pressure_wave(rng: &mut impl Rng, t: usize, heart_rate: f64) -> Result<PressureWave> {
    PressureTemplate::sample(rng).render(t, heart_rate)
}

/// Reads `sample_rate,p0,...,p{T-1}` rows; an optional non-numeric header row is skipped.
pub fn load_pressure_waves(path: &Path) -> Result<Vec<PressureWave>> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_path(path)?;
    let mut waves = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = i + 1;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(PpgError::Row { what: "pressure CSV", row, detail: e.to_string() }),
        };
        if values.len() < 3 {
            return Err(PpgError::Row {
                what: "pressure CSV",
                row,
                detail: "need a sample rate and at least 2 samples".into(),
            });
        }
        let wave = PressureWave::new(values[1..].to_vec(), values[0]).map_err(|e| PpgError::Row {
            what: "pressure CSV",
            row,
            detail: e.to_string(),
        })?;
        waves.push(wave);
    }
    Ok(waves)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindkesselParams {
    pub r2: f64,
    pub c2: f64,
    pub r3: f64,
    pub c3: f64,
}

impl WindkesselParams {
    pub fn tau2(&self) -> f64 {
        self.r2 * self.c2
    }

    pub fn tau3(&self) -> f64 {
        self.r3 * self.c3
    }

    /// Deeper vessels are wider: lower resistance, higher compliance, faster.
    pub fn is_physiological(&self) -> bool {
        self.r2 > self.r3 && self.c2 < self.c3 && self.tau2() > self.tau3()
    }
}

/// Log-uniform sampling boxes for the lumped elements, plus time-constant windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindkesselBoxes {
    pub r2: (f64, f64),
    pub c2: (f64, f64),
    pub r3: (f64, f64),
    pub c3: (f64, f64),
    pub tau2: (f64, f64),
    pub tau3: (f64, f64),
    pub max_attempts: usize,
}

impl Default for WindkesselBoxes {
    fn default() -> Self {
        Self {
            r2: (0.1, 2.0),
            c2: (0.2, 1.0),
            r3: (0.01, 0.5),
            c3: (0.5, 2.0),
            tau2: (0.05, 0.5),
            tau3: (0.01, 0.2),
            max_attempts: 10_000,
        }
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

pub fn sample_windkessel(rng: &mut impl Rng, boxes: &WindkesselBoxes) -> Result<WindkesselParams> {
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    for _ in 0..boxes.max_attempts {
        let wk = WindkesselParams {
            r2: log_uniform(rng, boxes.r2),
            c2: log_uniform(rng, boxes.c2),
            r3: log_uniform(rng, boxes.r3),
            c3: log_uniform(rng, boxes.c3),
        };
        if wk.is_physiological() && inside(wk.tau2(), boxes.tau2) && inside(wk.tau3(), boxes.tau3) {
            return Ok(wk);
        }
    }
    Err(PpgError::RejectionBudget(boxes.max_attempts))
}

/// Pole-zero matched recurrences for both compartments over an arbitrary
/// driving sequence, zero initial state.
pub fn windkessel_response(p: &[f64], dt: f64, wk: &WindkesselParams) -> (Vec<f64>, Vec<f64>) {
    let a = (-dt / wk.tau2()).exp();
    let b = (-dt / wk.tau3()).exp();
    let g2 = wk.c2 * (1.0 - a) * (1.0 - b);
    let g3 = wk.c3 * (1.0 - b);
    let n = p.len();
    let mut q2 = vec![0.0; n];
    let mut q3 = vec![0.0; n];
    for i in 2..n {
        q2[i] = p[i - 2] * g2 + q2[i - 1] * (a + b) - q2[i - 2] * (a * b);
        q3[i] = (p[i - 1] - a * p[i - 2]) * g3 + q3[i - 1] * (a + b) - q3[i - 2] * (a * b);
    }
    (q2, q3)
}

/// Drives the recurrences with `n_cycles` repetitions of `p` and returns the
/// last cycle.
pub fn solve_windkessel(p: &PressureWave, wk: &WindkesselParams, n_cycles: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_cycles < 2 {
        return Err(PpgError::Invalid(format!("n_cycles must be >= 2, got {n_cycles}")));
    }
    let t = p.len();
    let drive: Vec<f64> = p.samples.iter().copied().cycle().take(t * n_cycles).collect();
    let (mut q2, mut q3) = windkessel_response(&drive, p.dt(), wk);
    let last2 = q2.split_off(drive.len() - t);
    let last3 = q3.split_off(drive.len() - t);
    if last2.iter().chain(&last3).any(|v| !v.is_finite()) {
        return Err(PpgError::NonFinite("windkessel solution"));
    }
    Ok((last2, last3))
}

/// Minimum blood-volume pulse amplitude after rescaling.
pub const MIN_BV_AMPLITUDE: f64 = 0.01;
pub const BV_RANGE: (f64, f64) = (1.0, 1.02);

/// Affine map of `q` onto `[lo, hi]`.
pub fn rescale_to_targets(q: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let (qmin, qmax) = min_max(q);
    let span = qmax - qmin;
    if !(span > f64::EPSILON * qmax.abs().max(qmin.abs())) {
        return Err(PpgError::Invalid("cannot rescale a constant waveform".into()));
    }
    Ok(q.iter().map(|v| (lo + (v - qmin) / span * (hi - lo)).clamp(lo, hi)).collect())
}

/// Rescales to a random `[lo, hi]` inside the blood-volume range with
/// `hi - lo >= MIN_BV_AMPLITUDE`, uniform over the admissible pairs.
pub fn rescale_to_bv(q: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let (lo, hi) = loop {
        let x = rng.random_range(BV_RANGE.0..=BV_RANGE.1);
        let y = rng.random_range(BV_RANGE.0..=BV_RANGE.1);
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        if hi - lo >= MIN_BV_AMPLITUDE {
            break (lo, hi);
        }
    };
    rescale_to_targets(q, lo, hi)
}

/// End-to-end dynamic prior: pressure template, Windkessel, rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPrior {
    pub boxes: WindkesselBoxes,
    pub heart_rate: (f64, f64),
    pub n_cycles: usize,
}

impl Default for DynamicsPrior {
    fn default() -> Self {
        Self { boxes: WindkesselBoxes::default(), heart_rate: (50.0, 100.0), n_cycles: 3 }
    }
}

impl DynamicsPrior {
    pub fn sample(&self, rng: &mut impl Rng, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let hr = rng.random_range(self.heart_rate.0..=self.heart_rate.1);
        let wave = synth_pressure_wave(rng, t, hr)?;
        self.from_wave(rng, &wave)
    }

    pub fn from_wave(&self, rng: &mut impl Rng, wave: &PressureWave) -> Result<(Vec<f64>, Vec<f64>)> {
        let wk = sample_windkessel(rng, &self.boxes)?;
        let (q2, q3) = solve_windkessel(wave, &wk, self.n_cycles)?;
        Ok((rescale_to_bv(&q2, rng)?, rescale_to_bv(&q3, rng)?))
    }
}

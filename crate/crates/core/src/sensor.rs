//! LED spectra, channel mixing, measurement noise and PPG features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::PulseTensor;
use crate::error::{PpgError, Result};
use crate::optics::spectra::LAMBDA_RANGE;

pub const LED_CENTERS: [f64; 4] = [525.0, 660.0, 850.0, 940.0];
pub const LED_FWHM: [f64; 4] = [30.0, 25.0, 25.0, 25.0];
/// Raw offset added to every receiver channel for sensor misspecification.
pub const SENSOR_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorMode {
    FourWavelength,
    WideSpectrum,
}

/// Simulation wavelengths plus one normalized weight row per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub mode: SensorMode,
    pub grid: Vec<f64>,
    /// `(channels, grid.len())`, each row summing to one.
    pub profiles: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

fn wavelength_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(PpgError::Config(format!("wavelength step must be positive, got {step}")));
    }
    let (lo, hi) = LAMBDA_RANGE;
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Gaussian LED line on `grid`, cut at three standard deviations, unit sum.
pub fn gaussian_profile(center: f64, fwhm: f64, grid: &[f64]) -> Result<Vec<f64>> {
    let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let w: Vec<f64> = grid
        .iter()
        .map(|l| {
            let z = (l - center) / sigma;
            if z.abs() <= 3.0 {
                (-0.5 * z * z).exp()
            } else {
                0.0
            }
        })
        .collect();
    normalize(w, &format!("LED at {center} nm"))
}

fn normalize(mut w: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if !(s > 0.0) || w.iter().any(|v| *v < 0.0) {
        return Err(PpgError::Config(format!("{what}: profile has no positive weight on the grid")));
    }
    w.iter_mut().for_each(|v| *v /= s);
    Ok(w)
}

impl SensorConfig {
    pub fn four_wavelength(step: f64) -> Result<Self> {
        let full = wavelength_grid(step)?;
        let profiles: Vec<Vec<f64>> =
            LED_CENTERS.iter().zip(LED_FWHM).map(|(c, f)| gaussian_profile(*c, f, &full)).collect::<Result<_>>()?;
        let labels = LED_CENTERS.iter().map(|c| format!("led{c:.0}")).collect();
        Self { mode: SensorMode::FourWavelength, grid: full, profiles, labels }.pruned()
    }

    pub fn wide_spectrum(step: f64) -> Result<Self> {
        let grid = wavelength_grid(step)?;
        let n = grid.len();
        let profiles = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let labels = grid.iter().map(|l| format!("nm{l:.0}")).collect();
        Ok(Self { mode: SensorMode::WideSpectrum, grid, profiles, labels })
    }

    /// LED profiles from CSV files of `(wavelength, weight)` rows,
    /// interpolated onto the grid.
    pub fn from_led_files(paths: &[&Path], step: f64) -> Result<Self> {
        let full = wavelength_grid(step)?;
        let mut profiles = Vec::with_capacity(paths.len());
        let mut labels = Vec::with_capacity(paths.len());
        for p in paths {
            let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(p)?;
            let mut pts: Vec<(f64, f64)> = Vec::new();
            for (row, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let parse = |i: usize| -> Result<f64> {
                    rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| PpgError::Row {
                        what: "LED profile",
                        row: row + 1,
                        detail: format!("{}: column {} is not a number", p.display(), i + 1),
                    })
                };
                if row == 0 && rec.get(0).is_some_and(|s| s.trim().parse::<f64>().is_err()) {
                    continue;
                }
                pts.push((parse(0)?, parse(1)?));
            }
            if pts.len() < 2 || pts.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(PpgError::Config(format!("{}: need increasing wavelengths", p.display())));
            }
            let w = full
                .iter()
                .map(|&l| {
                    if l < pts[0].0 || l > pts[pts.len() - 1].0 {
                        return 0.0;
                    }
                    let k = pts.partition_point(|q| q.0 <= l).clamp(1, pts.len() - 1);
                    let ((x0, y0), (x1, y1)) = (pts[k - 1], pts[k]);
                    y0 + (y1 - y0) * (l - x0) / (x1 - x0)
                })
                .collect();
            profiles.push(normalize(w, &p.display().to_string())?);
            labels.push(p.file_stem().map_or_else(|| "led".into(), |s| s.to_string_lossy().into_owned()));
        }
        Self { mode: SensorMode::FourWavelength, grid: full, profiles, labels }.pruned()
    }

    /// Drop grid wavelengths no channel uses.
    fn pruned(self) -> Result<Self> {
        let keep: Vec<usize> = (0..self.grid.len()).filter(|&i| self.profiles.iter().any(|p| p[i] > 0.0)).collect();
        Ok(Self {
            grid: keep.iter().map(|&i| self.grid[i]).collect(),
            profiles: self.profiles.iter().map(|p| keep.iter().map(|&i| p[i]).collect()).collect(),
            ..self
        })
    }

    pub fn n_channels(&self) -> usize {
        self.profiles.len()
    }

    /// Mixing matrix `(grid, channels)`, row-major.
    pub fn mixing_matrix(&self) -> Vec<f64> {
        let (l, n) = (self.grid.len(), self.n_channels());
        let mut w = vec![0.0; l * n];
        for (c, p) in self.profiles.iter().enumerate() {
            for (i, v) in p.iter().enumerate() {
                w[i * n + c] = *v;
            }
        }
        w
    }
}

/// Weighted sum over the grid for every receiver, channel and time step.
pub fn mix_leds(spectral: &PulseTensor, config: &SensorConfig) -> Result<PulseTensor> {
    if spectral.channels != config.grid.len() {
        return Err(PpgError::Invalid(format!(
            "pulse has {} wavelengths, sensor grid has {}",
            spectral.channels,
            config.grid.len()
        )));
    }
    if config.mode == SensorMode::WideSpectrum {
        return PulseTensor::new(
            spectral.receivers,
            spectral.channels,
            spectral.timesteps,
            spectral.values.clone(),
            config.labels.clone(),
        );
    }
    let (r_n, n, t) = (spectral.receivers, config.n_channels(), spectral.timesteps);
    let mut out = vec![0.0; r_n * n * t];
    for r in 0..r_n {
        for (c, p) in config.profiles.iter().enumerate() {
            let dst = &mut out[(r * n + c) * t..(r * n + c + 1) * t];
            for (i, w) in p.iter().enumerate() {
                if *w != 0.0 {
                    for (d, s) in dst.iter_mut().zip(spectral.series(r, i)) {
                        *d += w * s;
                    }
                }
            }
        }
    }
    PulseTensor::new(r_n, n, t, out, config.labels.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub sigma_w: f64,
    pub k_shot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseName {
    None,
    Low,
    Medium,
    High,
    VeryHigh,
    Extreme,
}

impl NoiseName {
    pub const ALL: [NoiseName; 6] = [Self::None, Self::Low, Self::Medium, Self::High, Self::VeryHigh, Self::Extreme];

    pub fn level(self) -> NoiseLevel {
        let (sigma_w, k_shot) = match self {
            Self::None => (0.0, 0.0),
            Self::Low => (1e-6, 1e-7),
            Self::Medium => (1e-5, 1e-6),
            Self::High => (1e-4, 1e-5),
            Self::VeryHigh => (1e-3, 1e-4),
            Self::Extreme => (1e-2, 1e-3),
        };
        NoiseLevel { sigma_w, k_shot }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
            Self::VeryHigh => "very-high",
            Self::Extreme => "extreme",
        }
    }
}

impl fmt::Display for NoiseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseName {
    type Err = PpgError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| PpgError::Config(format!("unknown noise level '{s}'")))
    }
}

/// `x = x_hat + sqrt(k x_hat) z1 + sigma z2`, independently per element.
pub fn add_noise(x: &PulseTensor, level: NoiseLevel, rng: &mut impl Rng) -> Result<PulseTensor> {
    if let Some(v) = x.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(PpgError::Invalid(format!("noise needs non-negative signal, found {v}")));
    }
    let mut out = x.clone();
    if level.sigma_w == 0.0 && level.k_shot == 0.0 {
        return Ok(out);
    }
    for v in &mut out.values {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        *v += (level.k_shot * *v).sqrt() * z1 + level.sigma_w * z2;
    }
    Ok(out)
}

pub fn add_offset(x: &PulseTensor, offset: f64) -> PulseTensor {
    let mut out = x.clone();
    out.values.iter_mut().for_each(|v| *v += offset);
    out
}

/// DC `(R, N)`, AC and nAC `(R, N, T)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub receivers: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub dc: Vec<f64>,
    pub ac: Vec<f64>,
    pub nac: Vec<f64>,
}

pub fn extract_features(x: &PulseTensor) -> Result<Features> {
    let t = x.timesteps;
    if t < 2 {
        return Err(PpgError::Invalid("features need at least two time steps".into()));
    }
    let mut dc = Vec::with_capacity(x.receivers * x.channels);
    let mut ac = Vec::with_capacity(x.values.len());
    let mut nac = Vec::with_capacity(x.values.len());
    for s in x.values.chunks(t) {
        let m = s.iter().sum::<f64>() / t as f64;
        if m == 0.0 {
            return Err(PpgError::Invalid("zero DC component; nAC undefined".into()));
        }
        dc.push(m);
        ac.extend(s.iter().map(|v| v - m));
        nac.extend(s.iter().map(|v| (v - m) / m));
    }
    Ok(Features { receivers: x.receivers, channels: x.channels, timesteps: t, dc, ac, nac })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MisspecKind {
    None,
    Noise,
    Sensor,
    Skin,
    Combined,
}

impl MisspecKind {
    pub const ALL: [MisspecKind; 5] = [Self::None, Self::Noise, Self::Sensor, Self::Skin, Self::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Noise => "noise",
            Self::Sensor => "sensor",
            Self::Skin => "skin",
            Self::Combined => "combined",
        }
    }

    pub fn needs_skin_surrogate(self) -> bool {
        matches!(self, Self::Skin | Self::Combined)
    }
}

impl fmt::Display for MisspecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MisspecKind {
    type Err = PpgError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PpgError::Config(format!("unknown misspecification kind '{s}'")))
    }
}

/// How simulated and observed pulses differ for one misspecification kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisspecPlan {
    pub kind: MisspecKind,
    pub sim_noise: NoiseName,
    pub obs_noise: NoiseName,
    pub offset: f64,
    /// Observations come from the surrogate of the perturbed skin geometry.
    pub obs_skin: bool,
}

impl MisspecPlan {
    /// `noise` is the level shared by simulation and observation when the
    /// kind does not itself change noise.
    pub fn new(kind: MisspecKind, noise: NoiseName) -> Self {
        let (sim_noise, obs_noise) = match kind {
            MisspecKind::Noise => (NoiseName::None, NoiseName::Medium),
            MisspecKind::Combined => (NoiseName::Medium, NoiseName::High),
            _ => (noise, noise),
        };
        Self {
            kind,
            sim_noise,
            obs_noise,
            offset: if matches!(kind, MisspecKind::Sensor | MisspecKind::Combined) { SENSOR_OFFSET } else { 0.0 },
            obs_skin: kind.needs_skin_surrogate(),
        }
    }

    /// Observation from a clean pulse of the appropriate skin model:
    /// noise first, then the raw offset.
    pub fn observe(&self, clean: &PulseTensor, rng: &mut impl Rng) -> Result<PulseTensor> {
        let noisy = add_noise(clean, self.obs_noise.level(), rng)?;
        Ok(if self.offset != 0.0 { add_offset(&noisy, self.offset) } else { noisy })
    }
}

//! Monte Carlo photon transport in a three-layer slab.

mod engine;
mod lut;

use serde::{Deserialize, Serialize};

use crate::error::{PpgError, Result};
use crate::optics::N_LAYERS;

pub use engine::{fresnel_reflectance, sample_hg_cos, simulate, Mode, Tally, TraceOutput};
pub use lut::LutSimulator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorShape {
    /// Disc centered at `spacing` along the azimuth direction.
    Disc,
    /// Full annulus at radius `spacing`; same radial acceptance, all azimuths.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabGeometry {
    pub thickness: [f64; N_LAYERS],
    pub n_tissue: f64,
    pub n_ambient: f64,
    pub source_diameter: f64,
    pub spacings: Vec<f64>,
    pub detector_diameter: f64,
    pub shape: DetectorShape,
    /// Direction (radians) of disc detector centers from the source.
    pub azimuth: f64,
    /// Photons whose total path exceeds this (mm) are dropped.
    pub path_cutoff: f64,
}

impl Default for SlabGeometry {
    fn default() -> Self {
        Self {
            thickness: [0.2, 1.5, 18.3],
            n_tissue: 1.4,
            n_ambient: 1.0,
            source_diameter: 3.2,
            spacings: vec![3.0, 4.0, 5.0, 6.0],
            detector_diameter: 0.5,
            shape: DetectorShape::Ring,
            azimuth: 0.0,
            path_cutoff: 500.0,
        }
    }
}

impl SlabGeometry {
    pub fn with_thickness(mut self, t: [f64; N_LAYERS]) -> Self {
        self.thickness = t;
        self
    }

    pub fn n_detectors(&self) -> usize {
        self.spacings.len()
    }

    pub fn depth(&self) -> f64 {
        self.thickness.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thickness.iter().any(|t| !(*t > 0.0)) {
            return Err(PpgError::Invalid("layer thicknesses must be positive".into()));
        }
        if !(self.n_tissue >= 1.0 && self.n_ambient > 0.0) {
            return Err(PpgError::Invalid("refractive indices out of range".into()));
        }
        let half = 0.5 * self.detector_diameter;
        let src = 0.5 * self.source_diameter;
        if self.spacings.iter().any(|s| s - half < src) {
            return Err(PpgError::Invalid("a detector overlaps the source".into()));
        }
        if self.spacings.windows(2).any(|w| w[1] - w[0] < self.detector_diameter) {
            return Err(PpgError::Invalid("detectors overlap each other".into()));
        }
        if self.spacings.len() > u8::MAX as usize {
            return Err(PpgError::Invalid("too many detectors".into()));
        }
        Ok(())
    }

    /// Detector containing the exit point, if any.
    pub fn detector_at(&self, x: f64, y: f64) -> Option<usize> {
        let half = 0.5 * self.detector_diameter;
        match self.shape {
            DetectorShape::Ring => {
                let r = x.hypot(y);
                self.spacings.iter().position(|s| (r - s).abs() <= half)
            }
            DetectorShape::Disc => {
                let (c, s_) = (self.azimuth.cos(), self.azimuth.sin());
                self.spacings.iter().position(|s| {
                    let dx = x - s * c;
                    let dy = y - s * s_;
                    dx * dx + dy * dy <= half * half
                })
            }
        }
    }

    /// Stable digest used to key cached scatter-only runs.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("geometry serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// One detected photon: detector index, path length per layer (mm), exit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonRecord {
    pub detector: u8,
    pub paths: [f64; N_LAYERS],
    pub weight: f64,
}

/// Detected / emitted fraction per detector with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReading {
    pub fractions: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Scatter-only run: every detected photon's path lengths plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRun {
    pub mu_s: f64,
    pub g: f64,
    pub n_photons: u64,
    pub n_detectors: usize,
    pub records: Vec<PhotonRecord>,
    pub tally: Tally,
}

impl ScatterRun {
    /// White Monte Carlo: reweight every detected photon by `exp(-sum mu_a[l] s_l)`.
    pub fn apply_absorption(&self, mu_a: &[f64; N_LAYERS]) -> Result<DetectorReading> {
        if mu_a.iter().any(|m| !(*m >= 0.0)) {
            return Err(PpgError::Invalid(format!("absorption must be >= 0, got {mu_a:?}")));
        }
        let mut sum = vec![0.0; self.n_detectors];
        let mut sumsq = vec![0.0; self.n_detectors];
        for r in &self.records {
            let att = -(mu_a[0] * r.paths[0] + mu_a[1] * r.paths[1] + mu_a[2] * r.paths[2]);
            let w = r.weight * att.exp();
            sum[r.detector as usize] += w;
            sumsq[r.detector as usize] += w * w;
        }
        Ok(reading_from_sums(&sum, &sumsq, self.n_photons))
    }
}

/// Mean and standard error of per-photon contributions (zeros included).
pub(crate) fn reading_from_sums(sum: &[f64], sumsq: &[f64], n: u64) -> DetectorReading {
    let nf = n as f64;
    let mut fractions = Vec::with_capacity(sum.len());
    let mut std_errors = Vec::with_capacity(sum.len());
    for (s, q) in sum.iter().zip(sumsq) {
        let mean = s / nf;
        let var = if n > 1 { ((q - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        fractions.push(mean);
        std_errors.push((var / nf).sqrt());
    }
    DetectorReading { fractions, std_errors }
}

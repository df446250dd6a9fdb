//! Parameter space, prior, and the core data carriers.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PpgError, Result};

pub const DEFAULT_PARAMS_TOML: &str = include_str!("../assets/params.toml");

pub const N_STATIC: usize = 9;
pub const N_DYNAMIC: usize = 2;
/// Statics followed by the two dynamic waveforms.
pub const N_PARAMS: usize = N_STATIC + N_DYNAMIC;

pub const STATIC_NAMES: [&str; N_STATIC] = ["A", "SP", "Mel", "BV2", "BV3", "VD2", "VD3", "SA", "dSV"];
pub const DYNAMIC_NAMES: [&str; N_DYNAMIC] = ["dBV2", "dBV3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StaticParam {
    A = 0,
    Sp,
    Mel,
    Bv2,
    Bv3,
    Vd2,
    Vd3,
    Sa,
    Dsv,
}

impl StaticParam {
    pub const ALL: [StaticParam; N_STATIC] =
        [Self::A, Self::Sp, Self::Mel, Self::Bv2, Self::Bv3, Self::Vd2, Self::Vd3, Self::Sa, Self::Dsv];

    pub fn name(self) -> &'static str {
        STATIC_NAMES[self as usize]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        STATIC_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| PpgError::UnknownParam(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub kind: ParamKind,
    #[serde(default)]
    pub unit: String,
}

impl ParamRange {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Standard deviation of the uniform distribution on the range.
    pub fn std(&self) -> f64 {
        self.width() / 12f64.sqrt()
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Deserialize)]
struct RawEntry {
    name: String,
    lo: f64,
    hi: f64,
    #[serde(default)]
    unit: String,
}

#[derive(Deserialize)]
struct RawSpace {
    version: u32,
    timesteps: usize,
    #[serde(rename = "static")]
    statics: Vec<RawEntry>,
    #[serde(rename = "dynamic")]
    dynamics: Vec<RawEntry>,
}

/// The parameter table: ranges for the 9 statics and 2 dynamics, plus T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub version: u32,
    pub timesteps: usize,
    pub statics: Vec<ParamRange>,
    pub dynamics: Vec<ParamRange>,
}

impl Default for ParamSpace {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_PARAMS_TOML).expect("embedded parameter table is valid")
    }
}

impl ParamSpace {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: RawSpace = toml::from_str(s)?;
        let convert = |entries: Vec<RawEntry>, kind: ParamKind, names: &[&str]| -> Result<Vec<ParamRange>> {
            if entries.len() != names.len() {
                return Err(PpgError::Config(format!(
                    "expected {} {kind:?} parameters, found {}",
                    names.len(),
                    entries.len()
                )));
            }
            entries
                .into_iter()
                .zip(names)
                .map(|(e, want)| {
                    if e.name != *want {
                        return Err(PpgError::Config(format!("expected parameter `{want}`, found `{}`", e.name)));
                    }
                    if !(e.lo < e.hi) {
                        return Err(PpgError::Config(format!("range for `{}` has lo >= hi", e.name)));
                    }
                    Ok(ParamRange { name: e.name, lo: e.lo, hi: e.hi, kind, unit: e.unit })
                })
                .collect()
        };
        if raw.timesteps < 2 {
            return Err(PpgError::Config("timesteps must be at least 2".into()));
        }
        Ok(Self {
            version: raw.version,
            timesteps: raw.timesteps,
            statics: convert(raw.statics, ParamKind::Static, &STATIC_NAMES)?,
            dynamics: convert(raw.dynamics, ParamKind::Dynamic, &DYNAMIC_NAMES)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn range(&self, name: &str) -> Result<&ParamRange> {
        self.statics
            .iter()
            .chain(&self.dynamics)
            .find(|r| r.name == name)
            .ok_or_else(|| PpgError::UnknownParam(name.to_string()))
    }

    pub fn static_range(&self, p: StaticParam) -> &ParamRange {
        &self.statics[p as usize]
    }

    /// Range of parameter `i` in the combined static+dynamic ordering.
    pub fn by_index(&self, i: usize) -> &ParamRange {
        if i < N_STATIC {
            &self.statics[i]
        } else {
            &self.dynamics[i - N_STATIC]
        }
    }

    pub fn clamp_to_range(&self, name: &str, value: f64) -> Result<f64> {
        Ok(self.range(name)?.clamp(value))
    }

    /// Independent uniform draws for every static parameter.
    pub fn sample_static_prior(&self, rng: &mut impl Rng) -> Statics {
        let mut v = [0.0; N_STATIC];
        for (x, r) in v.iter_mut().zip(&self.statics) {
            *x = rng.random_range(r.lo..r.hi);
        }
        Statics(v)
    }
}

/// Static parameters in table order (units as in the parameter table).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statics(pub [f64; N_STATIC]);

impl Statics {
    pub fn get(&self, p: StaticParam) -> f64 {
        self.0[p as usize]
    }

    pub fn set(&mut self, p: StaticParam, v: f64) {
        self.0[p as usize] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Statics plus per-timestep blood-volume scaling in dermis and subcutis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioParams {
    pub statics: Statics,
    pub dbv2: Vec<f64>,
    pub dbv3: Vec<f64>,
}

impl BioParams {
    pub fn new(statics: Statics, dbv2: Vec<f64>, dbv3: Vec<f64>) -> Result<Self> {
        if dbv2.len() != dbv3.len() || dbv2.is_empty() {
            return Err(PpgError::Invalid(format!(
                "dynamic waveforms must be non-empty and equally long ({} vs {})",
                dbv2.len(),
                dbv3.len()
            )));
        }
        Ok(Self { statics, dbv2, dbv3 })
    }

    /// Constant dynamics at the given scaling.
    pub fn constant(statics: Statics, t: usize, dbv: f64) -> Self {
        Self { statics, dbv2: vec![dbv; t], dbv3: vec![dbv; t] }
    }

    pub fn timesteps(&self) -> usize {
        self.dbv2.len()
    }

    pub fn validate(&self, space: &ParamSpace) -> Result<()> {
        for (v, r) in self.statics.0.iter().zip(&space.statics) {
            if !r.contains(*v) {
                return Err(PpgError::Invalid(format!("{} = {v} outside [{}, {}]", r.name, r.lo, r.hi)));
            }
        }
        for (w, r) in [&self.dbv2, &self.dbv3].into_iter().zip(&space.dynamics) {
            if let Some(v) = w.iter().find(|v| !r.contains(**v)) {
                return Err(PpgError::Invalid(format!("{} = {v} outside [{}, {}]", r.name, r.lo, r.hi)));
            }
        }
        Ok(())
    }
}

/// PPG pulse: `values[(r * n + c) * t + k]` for receiver `r`, channel `c`, time `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseTensor {
    pub receivers: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

impl PulseTensor {
    pub fn new(
        receivers: usize,
        channels: usize,
        timesteps: usize,
        values: Vec<f64>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if values.len() != receivers * channels * timesteps {
            return Err(PpgError::Invalid(format!(
                "pulse of {} values does not match {receivers}x{channels}x{timesteps}",
                values.len()
            )));
        }
        if labels.len() != channels {
            return Err(PpgError::Invalid(format!("{} labels for {channels} channels", labels.len())));
        }
        Ok(Self { receivers, channels, timesteps, values, labels })
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn get(&self, r: usize, c: usize, k: usize) -> f64 {
        self.values[(r * self.channels + c) * self.timesteps + k]
    }

    /// Time series of one receiver/channel pair.
    pub fn series(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.channels + c) * self.timesteps;
        &self.values[start..start + self.timesteps]
    }

    pub fn series_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let start = (r * self.channels + c) * self.timesteps;
        &mut self.values[start..start + self.timesteps]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_table_matches_names_and_ranges() {
        let s = ParamSpace::default();
        assert_eq!(s.timesteps, 64);
        let mel = s.range("Mel").unwrap();
        assert_eq!((mel.lo, mel.hi), (0.25, 14.0));
        assert_eq!(s.range("dBV3").unwrap().kind, ParamKind::Dynamic);
        assert!(s.range("HR").is_err());
    }

    #[test]
    fn clamp_examples() {
        let s = ParamSpace::default();
        assert_eq!(s.clamp_to_range("SA", 120.0).unwrap(), 100.0);
        assert_eq!(s.clamp_to_range("SA", 60.0).unwrap(), 60.0);
        assert_eq!(s.clamp_to_range("VD2", 0.02).unwrap(), 0.02);
        assert!(matches!(s.clamp_to_range("nope", 1.0), Err(PpgError::UnknownParam(_))));
    }

    #[test]
    fn rejects_malformed_tables() {
        let bad = DEFAULT_PARAMS_TOML.replace("name = \"SP\"", "name = \"Sp\"");
        assert!(ParamSpace::from_toml_str(&bad).is_err());
        let inverted = DEFAULT_PARAMS_TOML.replace("lo = 60.0", "lo = 160.0");
        assert!(ParamSpace::from_toml_str(&inverted).is_err());
    }

    #[test]
    fn uniform_sa_mean() {
        let s = ParamSpace::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean = (0..n).map(|_| s.sample_static_prior(&mut rng).get(StaticParam::Sa)).sum::<f64>() / n as f64;
        // uniform on [60, 100]: sd 11.55, standard error 0.037
        assert!((mean - 80.0).abs() < 0.5, "{mean}");
    }
}

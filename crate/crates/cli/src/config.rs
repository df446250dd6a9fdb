//! Experiment configuration: a scale profile plus TOML overrides merged over it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ppgen::domain::ParamSpace;
use ppgen::inference::{HaiConfig, NpeConfig};
use ppgen::optics::{SkinModel, Spectra};
use ppgen::sensor::{MisspecKind, NoiseName, SensorConfig, SensorMode};
use ppgen::surrogate::{LutConfig, SurrogateConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hai,
    SimOnly,
    RealOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Self::Hai, Self::SimOnly, Self::RealOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hai => "hai",
            Self::SimOnly => "sim-only",
            Self::RealOnly => "real-only",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pulses per set, per replicate seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizes {
    pub train: usize,
    pub val: usize,
    /// Observations the offset (and the Real-only encoder) is fitted on.
    pub obs: usize,
    /// Held-out observations every method is scored on.
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub sensor: SensorMode,
    /// Wavelength grid spacing in nm.
    pub lambda_step: f64,
    pub noise: NoiseName,
    pub kinds: Vec<MisspecKind>,
    pub methods: Vec<Method>,
    /// Replicate seeds; each one reruns data generation and every trained stage.
    pub seeds: Vec<u64>,
    /// Seed for the shared lookup table and surrogate.
    pub asset_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectra: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub leds: Vec<PathBuf>,
    pub data: DataSizes,
    pub lut: LutConfig,
    pub surrogate: SurrogateConfig,
    pub npe: NpeConfig,
    pub hai: HaiConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            sensor: SensorMode::FourWavelength,
            lambda_step: 10.0,
            noise: NoiseName::None,
            kinds: vec![MisspecKind::None, MisspecKind::Sensor],
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            asset_seed: 0,
            params: None,
            spectra: None,
            leds: Vec::new(),
            data: DataSizes { train: 3000, val: 300, obs: 300, test: 500 },
            lut: LutConfig::desk(),
            surrogate: SurrogateConfig::desk(),
            npe: NpeConfig::desk(),
            hai: HaiConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            sensor: SensorMode::WideSpectrum,
            lambda_step: 1.0,
            kinds: MisspecKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            data: DataSizes { train: 200_000, val: 10_000, obs: 10_000, test: 10_000 },
            lut: LutConfig::paper(),
            surrogate: SurrogateConfig::paper(),
            npe: NpeConfig::paper().wide(),
            hai: HaiConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Overrides in `text` on top of the profile it names (desk if absent).
    /// Tables merge key by key; arrays and scalars replace. Relative asset
    /// paths are taken from the working directory.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self> {
        let user: Value = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let profile = match user.get("profile") {
            Some(p) => {
                serde_json::from_value(p.clone()).map_err(|e| CliError::Usage(format!("config profile: {e}")))?
            }
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::preset(profile))?;
        merge(&mut base, user);
        serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Relative asset paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        cfg.params.iter_mut().for_each(fix);
        cfg.spectra.iter_mut().for_each(fix);
        cfg.leds.iter_mut().for_each(fix);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Usage(format!("config: {m}")));
        if self.kinds.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return bad("kinds, methods and seeds must be non-empty");
        }
        let d = &self.data;
        if d.train == 0 || d.val == 0 || d.obs < 2 || d.test < 2 {
            return bad("data sizes must allow training, validation and scoring");
        }
        if !(self.lambda_step > 0.0) {
            return bad("lambda_step must be positive");
        }
        if self.sensor == SensorMode::WideSpectrum && !self.leds.is_empty() {
            return bad("LED profiles only apply to the four-wavelength sensor");
        }
        for p in self.params.iter().chain(&self.spectra).chain(&self.leds) {
            if !p.exists() {
                return Err(CliError::Core(ppgen::PpgError::MissingAsset(p.display().to_string())));
            }
        }
        Ok(())
    }

    pub fn assets(&self) -> Result<Assets> {
        let space = match &self.params {
            Some(p) => ParamSpace::load(p)?,
            None => ParamSpace::default(),
        };
        let spectra = match &self.spectra {
            Some(d) => Spectra::from_csv_dir(d)?,
            None => Spectra::synthetic(),
        };
        let sensor = match self.sensor {
            SensorMode::WideSpectrum => SensorConfig::wide_spectrum(self.lambda_step)?,
            SensorMode::FourWavelength if self.leds.is_empty() => SensorConfig::four_wavelength(self.lambda_step)?,
            SensorMode::FourWavelength => {
                let paths: Vec<&Path> = self.leds.iter().map(PathBuf::as_path).collect();
                SensorConfig::from_led_files(&paths, self.lambda_step)?
            }
        };
        Ok(Assets { space, spectra, sensor })
    }

    /// Encoder settings matching the sensor: wide inputs get the embedding stack.
    pub fn npe_config(&self) -> NpeConfig {
        let mut c = self.npe.clone();
        if self.sensor == SensorMode::WideSpectrum && c.encoder.embedding.is_none() {
            c = c.wide();
        }
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        // through JSON so large integers survive; TOML has no u64
        let v = serde_json::to_value(self)?;
        toml::to_string_pretty(&v).map_err(|e| CliError::Usage(format!("config cannot be written as TOML: {e}")))
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolved inputs shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assets {
    pub space: ParamSpace,
    pub spectra: Spectra,
    pub sensor: SensorConfig,
}

impl Assets {
    pub fn skin(misspecified: bool) -> SkinModel {
        if misspecified {
            SkinModel::misspecified()
        } else {
            SkinModel::default()
        }
    }
}

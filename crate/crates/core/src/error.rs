use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpgError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what} row {row}: {detail}")]
    Row { what: &'static str, row: usize, detail: String },
    #[error("rejection sampling exceeded {0} attempts; check the sampling boxes")]
    RejectionBudget(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("wavelength {0} nm outside spectra grid [{1}, {2}]")]
    WavelengthOutOfRange(f64, f64, f64),
    #[error("no cached scatter-only run for mu_s = {0}")]
    CacheMiss(f64),
    #[error("missing asset: {0}")]
    MissingAsset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Nn(#[from] ppgen_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, PpgError>;

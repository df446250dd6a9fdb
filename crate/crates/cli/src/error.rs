use ppgen::PpgError;
use ppgen_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] PpgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("artifact {path}: {detail}")]
    Integrity { path: String, detail: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for problems the caller can fix (bad input or config), 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Csv(_) => 1,
            Self::Core(e) => match e {
                PpgError::UnknownParam(_)
                | PpgError::Config(_)
                | PpgError::Invalid(_)
                | PpgError::Row { .. }
                | PpgError::MissingAsset(_)
                | PpgError::WavelengthOutOfRange(..)
                | PpgError::Csv(_)
                | PpgError::Toml(_) => 1,
                PpgError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            },
            Self::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 1,
            Self::Nn(NnError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 1,
            Self::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    Shape { op: &'static str, node: usize, detail: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("tensor store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

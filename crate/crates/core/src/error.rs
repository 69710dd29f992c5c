use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric needs both classes: {0}")]
    SingleClass(String),
    #[error("metric needs at least one positive label")]
    NoPositives,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("degenerate feature")]
    DegenerateFeature,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("more clusters than samples (k = {k}, n = {n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for {len} slots")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bank cold")]
    BankCold,
    #[error("empty shared view")]
    EmptySharedView,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

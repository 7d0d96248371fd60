use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("duplicate axis {0}")]
    DuplicateAxis(usize),
    #[error("reduction over an empty extent")]
    EmptyReduction,
    #[error("invalid convolution config: {0}")]
    Config(String),
    #[error("invalid model spec: {0}")]
    Model(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

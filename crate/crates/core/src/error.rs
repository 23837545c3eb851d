use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("bandwidth resolved to zero ({0}); pass an explicit bandwidth")]
    ZeroBandwidth(&'static str),

    #[error("zero vector: {0}")]
    ZeroVector(String),

    #[error("class {class} has {available} samples, need more than {required}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("class {0} has no labeled training samples")]
    NoLabeledSamples(usize),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}

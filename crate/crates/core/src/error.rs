use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unrecognized dataset layout: {0}")]
    UnrecognizedLayout(String),

    #[error("sample {index}: label value {value} outside the class range 0..{classes}")]
    InvalidLabel { index: usize, value: u8, classes: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("node ({level}, {column}) is outside the triangular grid of depth {depth}")]
    NodeOutOfRange { level: usize, column: usize, depth: usize },

    #[error("non-finite loss {loss} on batch {batch:?}")]
    NonFiniteLoss { loss: String, batch: Vec<usize> },

    #[error("empty evaluation set")]
    EmptySet,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

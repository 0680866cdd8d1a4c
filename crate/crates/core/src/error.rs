use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch_norm in eval mode requires populated running statistics ({0})")]
    MissingRunningStats(String),

    #[error("value {value} outside the accepted range {range}")]
    OutOfRange { value: f64, range: &'static str },

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("manifest row {row} ({id}): file not found: {path}")]
    MissingFile { row: usize, id: String, path: PathBuf },

    #[error("manifest row {row} ({id}): size mismatch, {detail}")]
    SizeMismatch { row: usize, id: String, detail: String },

    #[error("manifest row {row} ({id}): {message}")]
    BadImage { row: usize, id: String, message: String },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {id}: {message}")]
    Evaluation { id: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

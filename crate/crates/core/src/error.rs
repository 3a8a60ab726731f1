use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("agent {0} not found")]
    NotFound(u64),

    #[error("parse error in {field}: {message}")]
    Parse { field: String, message: String },

    #[error("schema version {found} not supported (expected {expected})")]
    Schema { found: u32, expected: u32 },

    #[error("invariant violated at {field}: {message}")]
    Invariant { field: String, message: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("evaluation failed for {path}: {message}")]
    Evaluation { path: PathBuf, message: String },

    #[error("frame {0} has no present nodes")]
    EmptyFrame(usize),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invariant { field: field.into(), message: message.into() }
    }
}

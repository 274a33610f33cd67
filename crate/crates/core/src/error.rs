//! Crate-wide error type and its mapping to process exit codes.

use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::IngestError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingest(e) if e.is_config() => 2,
            Error::Data(_) | Error::Ingest(_) | Error::Io { .. } | Error::Json { .. } => 3,
            Error::Tensor(TensorError::Format(_) | TensorError::Io(_)) => 3,
            Error::NonFinite { .. } | Error::Tensor(_) => 4,
        }
    }
}

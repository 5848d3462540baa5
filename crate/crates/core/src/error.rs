use thiserror::Error;

use crate::archive::ArchiveError;
use crate::tensor::TensorError;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient windows: required {required}, available {available}")]
    InsufficientWindows { required: usize, available: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("freeze contract violated: {0}")]
    NotFrozen(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

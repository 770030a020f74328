use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("line {line}: index {index} out of bounds for mode {mode} (dim {dim})")]
    Bounds {
        line: usize,
        mode: usize,
        index: usize,
        dim: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("requested {requested} samples but only {available} are available")]
    Capacity { requested: u128, available: u128 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wraps an I/O failure so the message names the file involved.
pub(crate) fn with_path(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    }
}

impl Error {
    /// Numerical failures, as opposed to bad input data or bad arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Domain(_))
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}

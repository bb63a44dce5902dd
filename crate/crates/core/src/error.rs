use std::path::PathBuf;

use diffmath::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlagError {
    #[error(transparent)]
    Math(#[from] DiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("skeleton hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl FlagError {
    pub fn class(&self) -> ErrorClass {
        match self {
            FlagError::Invalid(_) | FlagError::Config(_) => ErrorClass::Usage,
            FlagError::Format(_)
            | FlagError::Io { .. }
            | FlagError::HashMismatch { .. }
            | FlagError::Dimension(_) => ErrorClass::Data,
            FlagError::Math(DiffError::Shape(_)) => ErrorClass::Data,
            FlagError::Math(_) | FlagError::Numeric(_) | FlagError::Degenerate(_) => {
                ErrorClass::Numeric
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlagError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, FlagError>;

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how a caller should react:
/// `Validation`/`Numeric` are caller or data errors, the rest are file-level
/// failures that identify the offending path.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt: {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn corrupt(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the CLI: 1 for validation/numeric failures,
    /// 2 for anything that went wrong at the file level.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Numeric(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } => 2,
        }
    }
}

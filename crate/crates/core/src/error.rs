use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("step index {index} out of range 1..={max}")]
    StepIndex { index: usize, max: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite values at diffusion step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 2 for invalid input or configuration, 3 for I/O,
    /// 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NumericFailure { .. } | Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

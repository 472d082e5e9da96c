use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),

    #[error("rejection sampling exhausted after {0} attempts")]
    RejectionExhausted(usize),

    #[error("labels are hidden in this dataset view")]
    Capability,

    #[error("format error in {what} at record {index}: {msg}")]
    Format {
        what: String,
        index: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, index: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            index,
            msg: msg.into(),
        }
    }

    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error kinds shared by every module. The CLI maps them onto exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or model structure are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data (labels, frames, files) is malformed.
    #[error("input error: {0}")]
    Input(String),
    /// An API was called out of order (e.g. backward on a non-scalar root).
    #[error("usage error: {0}")]
    Usage(String),
    /// A NaN or infinity showed up during computation.
    #[error("numeric error at {stage} (index {index}): {detail}")]
    Numeric {
        stage: &'static str,
        index: usize,
        detail: String,
    },
    /// A dataset or checkpoint on disk is incomplete or inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 internal/numeric failure, 2 input/config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Usage(_)
            | Error::Integrity(_)
            | Error::Json(_) => 2,
            Error::Numeric { .. } | Error::Io { .. } => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of its valid domain.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-deterministic evaluation: {0}")]
    Determinism(String),

    #[error("cannot place {requested} objects without overlap (placed {placed})")]
    Placement { requested: usize, placed: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// A verification (oracle, gradient, equivalence) check failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

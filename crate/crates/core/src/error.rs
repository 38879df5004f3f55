use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DefError {
    /// A value outside the support of a distribution, or natural
    /// parameters outside the natural domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or non-finite distribution parameters.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An architecture that fails validation.
    #[error("invalid architecture: {0}")]
    Architecture(String),

    /// A model term that cannot be evaluated on the given state.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// Malformed input file. Line numbers are 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Too many consecutive iterations produced non-finite gradients.
    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DefError>;

impl DefError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DefError::Io {
            path: path.into(),
            source,
        }
    }
}

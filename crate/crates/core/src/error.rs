use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The histogram does not yet hold enough values for the requested statistic.
    #[error("histogram not ready: holds {count} values, needs {required}")]
    NotReady { count: usize, required: usize },

    #[error("noise-rate estimation unavailable: no peak detected")]
    EstimationUnavailable,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("training diverged at iteration {iter}: {reason}")]
    Divergence { iter: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

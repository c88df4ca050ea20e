use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("topology error: worker {0} is not attached to any RSU")]
    Topology(u32),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation error: no updates to aggregate")]
    EmptyAggregation,

    #[error("seed {seed}, round {round}: {source}")]
    Run {
        seed: u64,
        round: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("incompatible runs: field `{0}` differs")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a training divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::Run { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Incompatible(_) => true,
            Error::Run { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

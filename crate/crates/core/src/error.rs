use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("node count mismatch: adjacency has {adjacency} nodes, signal has {signal}")]
    ShapeMismatch { adjacency: usize, signal: usize },

    #[error("missing-value density {density:.3} exceeds the {limit:.2} limit")]
    TooManyMissing { density: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite activation in encoder block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite {component} loss at epoch {epoch}")]
    NonFiniteLoss { component: &'static str, epoch: usize },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteActivation { .. } | Error::NonFiniteLoss { .. }
        )
    }
}

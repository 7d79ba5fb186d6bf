use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tracing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("invalid session {learner_id}: {}", violations.join("; "))]
    InvalidSession {
        learner_id: String,
        violations: Vec<String>,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite loss")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Ingest { .. } => "ingest",
            Error::InvalidSession { .. } => "invalid_session",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("word id out of range: {id} >= vocabulary size {vocab_size}")]
    WordIdOutOfRange { id: usize, vocab_size: usize },

    #[error("nonpositive count {count} for word {word_id} in document {doc}")]
    NonPositiveCount {
        doc: usize,
        word_id: usize,
        count: i64,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cycle detected in hypernym graph at node '{0}'")]
    Cycle(String),

    #[error("no overlap between taxonomy and vocabulary")]
    NoOverlap,

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Errors caused by bad inputs or configuration rather than by a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::WordIdOutOfRange { .. }
                | Error::NonPositiveCount { .. }
                | Error::DimensionMismatch { .. }
                | Error::Cycle(_)
                | Error::NoOverlap
                | Error::Taxonomy(_)
                | Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Checkpoint(_)
        )
    }
}

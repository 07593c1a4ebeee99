use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// [`Error::is_validation`] separates bad inputs and configuration from
/// failures that happen while running on valid inputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("span {start}..{end} out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("id mismatch between predictions and gold: {0}")]
    IdMismatch(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("component {0} is not present in this model")]
    MissingComponent(String),

    #[error("non-finite loss at step {step} (batch posts: {post_ids:?}): {detail}")]
    Diverged {
        step: usize,
        post_ids: Vec<String>,
        detail: String,
    },

    #[error("tagger request failed: {0}")]
    Tagger(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed inputs or configuration.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Diverged { .. } | Error::Tagger(_) => false,
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

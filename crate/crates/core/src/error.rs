use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown identifiers, invalid hyperparameters, missing fields.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("vocabularies share no common token; ensemble is impossible")]
    EmptyIntersection,

    #[error("anchor mismatch: {0}")]
    AnchorMismatch(String),

    #[error("model `{model}` cannot tokenize {text:?} (no token covers byte {byte:#04x} at offset {offset})")]
    Untokenizable {
        model: String,
        text: String,
        offset: usize,
        byte: u8,
    },

    /// NaN or Inf appeared in the inverse-transform search.
    #[error("non-finite value in search iterate at step {step}")]
    Numeric { step: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("protocol error: {reason} (frame: {frame})")]
    Protocol { reason: String, frame: String },

    #[error("vocabulary size mismatch for `{model}`: server reports {remote}, vocabulary file has {local}")]
    VocabMismatch {
        model: String,
        remote: usize,
        local: usize,
    },

    /// Remote backend did not answer in time; the request may be retried.
    #[error("timed out waiting for `{model}`")]
    Timeout { model: String },

    #[error("backend `{model}` failed: {source}")]
    Backend {
        model: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Timeout { .. } => true,
            Error::Backend { source, .. } => source.is_retryable(),
            _ => false,
        }
    }

    /// Whether the root cause is a numeric failure in the search.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::Backend { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

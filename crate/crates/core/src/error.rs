use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KktError>;

#[derive(Debug, Error)]
pub enum KktError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("schema error in example {id}: {msg}")]
    Schema { id: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at step {step} (example {example})")]
    NonFiniteLoss { step: usize, example: String, loss: f64 },

    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KktError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        KktError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KktError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record on line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {id:?} in domain {domain:?} on line {line}")]
    DuplicateId {
        id: String,
        domain: String,
        line: usize,
    },

    #[error("mention {example_id:?} references unknown entity {entity_id:?} in domain {domain:?}")]
    DanglingEntity {
        example_id: String,
        entity_id: String,
        domain: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("rewriter failed for entity {entity_id:?}: {message}")]
    Rewriter { entity_id: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no recalled queries")]
    NoRecalledQueries,

    #[error("no synthetic pairs generated")]
    NoSyntheticPairs,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

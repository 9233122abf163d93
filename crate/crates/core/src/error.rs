use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the named graph node.
    #[error("dimension error at `{node}`: {detail}")]
    Shape { node: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range (valid: {valid})")]
    OutOfRange { index: usize, valid: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("record {record} (line {line}): {detail}")]
    Record {
        record: usize,
        line: usize,
        detail: String,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

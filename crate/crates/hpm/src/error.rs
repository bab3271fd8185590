//! Shared error type. Exit-code mapping: contract/shape/config errors are
//! exit code 2, IO and file-format errors are exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HpmError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range for {len} rows")]
    Index { id: usize, len: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("parse error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HpmError {
    /// Process exit code for the CLI: 2 for contract-class errors, 3 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            HpmError::Io(_) | HpmError::Format { .. } | HpmError::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HpmError>;

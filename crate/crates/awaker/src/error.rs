//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation required a scalar (or other rank) and got something else.
    #[error("rank error: {0}")]
    Rank(String),

    /// NaN or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad configuration (hyperparameters, stage order, CLI flags).
    #[error("config error: {0}")]
    Config(String),

    /// Routing contract violated (missing context, unbound simplified layer).
    #[error("routing error: {0}")]
    Routing(String),

    /// Bad input data (empty corpus, mismatched logs, malformed instance).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed or truncated checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Payload bytes do not match the manifest checksum.
    #[error("checksum mismatch for '{name}': manifest {expected:#010x}, payload {actual:#010x}")]
    Checksum {
        name: String,
        expected: u32,
        actual: u32,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 for configuration/input problems, 3 for numeric or
    /// invariant failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Shape { .. }
            | Error::Rank(_)
            | Error::Numeric(_)
            | Error::Routing(_)
            | Error::Checkpoint(_)
            | Error::Checksum { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

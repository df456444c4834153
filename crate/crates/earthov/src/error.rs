//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A caller-facing precondition was violated (zero-norm vector,
    /// non-scalar loss, unnormalized image, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A numeric operation produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Inconsistent configuration (bad key, mismatched weights, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Missing or unusable user input (paths, corpora, manifests).
    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for internal invariant violations,
    /// 2 for user/input problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::NonFinite { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

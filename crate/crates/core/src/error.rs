//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model plumbing, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with what an operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter or argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A named parameter was not found in the store.
    #[error("missing parameter: {0}")]
    MissingParameter(String),

    /// PGM image decoding failed.
    #[error("pgm: {0}")]
    Pgm(#[from] PgmError),

    /// Checkpoint container is malformed or failed its integrity check.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Run configuration file is malformed or contains unknown keys.
    #[error("config: {0}")]
    Config(String),

    /// Underlying filesystem failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct PGM decode failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a binary PGM: expected magic \"P5\", got {0:?}")]
    BadMagic(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    BadMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("malformed header: {0}")]
    BadHeader(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Pgm(_) => 2,
            _ => 3,
        }
    }
}

use std::io;

use thiserror::Error;

/// Errors produced by the gpq library.
#[derive(Debug, Error)]
pub enum GpqError {
    #[error("zero vector (norm below 1e-12){}", match .subspace { Some(m) => format!(" in sub-vector {m}"), None => String::new() })]
    ZeroVector { subspace: Option<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("malformed code bytes: expected {expected} bytes, got {actual}")]
    MalformedBytes { expected: usize, actual: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("too few items: need at least {needed}, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("insufficient items: {0}")]
    InsufficientItems(String),

    #[error("insufficient classes: need at least {needed}, got {got}")]
    InsufficientClasses { needed: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown id {0}")]
    UnknownId(u64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, GpqError>;

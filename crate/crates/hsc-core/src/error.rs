//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or kernel shapes are incompatible. Carries both shapes.
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    /// A numeric invariant broke (non-finite value, invalid probability, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or stream does not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Config digests disagree between artifacts.
    #[error("config digest mismatch: artifact has {artifact:#018x}, model has {model:#018x}")]
    DigestMismatch { artifact: u64, model: u64 },

    /// Decoded symbols fail the payload checksum.
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset cannot support the requested fit (e.g. all labels at 0.5).
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn shape(expected: &[usize], got: &[usize], context: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format: {int_bits} integer + {frac_bits} fraction bits (need 15)")]
    InvalidFormat { int_bits: u8, frac_bits: u8 },

    #[error("wide accumulator overflow")]
    AccumulatorOverflow,

    #[error("accumulator fraction mismatch: {0} vs {1}")]
    FractionMismatch(u8, u8),

    #[error("value {0} is not representable in a 16-bit format")]
    Unrepresentable(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

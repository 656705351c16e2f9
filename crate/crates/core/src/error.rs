use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("bag has no instances")]
    EmptyBag,
    #[error("state error: {0}")]
    State(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

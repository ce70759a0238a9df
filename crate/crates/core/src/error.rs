//! Crate-wide error type.
//!
//! Shape contracts inside the compute graph are programmer errors and
//! panic with a message; everything that can be triggered by external
//! input (files, configs, degenerate batches, non-finite numerics)
//! surfaces as an [`enum@Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed external input (labels out of vocabulary, mismatched
    /// case lists, empty splits, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// NaN/Inf escaped a numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Every sampled loss weight was zero; the caller should skip the batch.
    #[error("degenerate batch: sample matrix sums to zero")]
    DegenerateBatch,

    /// A binary container (checkpoint or dataset case file) failed to parse.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Bad configuration file or flag combination.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

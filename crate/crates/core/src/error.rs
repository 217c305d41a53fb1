//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid instrument or run configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Invalid decay or dataset parameters.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Tensor/histogram shape does not match what the operation expects.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Input is structurally valid but degenerate for this operation
    /// (zero photons, empty window, all-zero curve).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed or unsupported file content (bad magic, version, layout).
    #[error("data format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Numeric failure: divergence, non-finite values, solver breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Quantization failure (excessive saturation, missing planes).
    #[error("quantization error: {0}")]
    Quantize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

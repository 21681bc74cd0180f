//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor operations, network construction, I/O and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A kernel size outside what the operation supports.
    #[error("{op}: unsupported kernel {kh}x{kw}")]
    BadKernel { op: &'static str, kh: usize, kw: usize },

    /// Max pooling requires even spatial extents.
    #[error("maxpool2x2: input {h}x{w} must have even height and width")]
    OddPoolInput { h: usize, w: usize },

    /// An invalid scalar argument (dropout rate, learning rate, ...).
    #[error("{0}")]
    BadArgument(String),

    /// The requested tile size cannot pass through the network.
    #[error("tile size {size} invalid at depth {depth}: {reason}")]
    InvalidTileSize {
        size: usize,
        depth: usize,
        reason: String,
    },

    /// Backward called on a tape with no recorded operations.
    #[error("backward: tape is empty")]
    EmptyTape,

    /// Backward called on a value that is not a scalar.
    #[error("backward: loss must be a 1x1x1x1 scalar, got {0}")]
    NonScalarLoss(String),

    /// A gradient contained NaN or infinity; the update step is refused.
    #[error("optimizer step rejected: non-finite gradient in {name}")]
    NonFiniteGradient { name: String },

    /// Training produced a non-finite loss.
    #[error("training aborted: non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    /// Malformed raster or checkpoint data.
    #[error("{0}")]
    Format(String),

    /// Stored and recomputed checkpoint checksums differ.
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    /// Invalid configuration value or file.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

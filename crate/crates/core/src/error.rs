use crate::tensor::Shape;
use thiserror::Error;

/// Errors surfaced by tensor ops, the tape, the physics model, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {ctx}: {lhs} vs {rhs}")]
    ShapeMismatch { ctx: &'static str, lhs: Shape, rhs: Shape },

    #[error("channel mismatch in {ctx}: input has {got} channels, expected {expected}")]
    ChannelMismatch { ctx: &'static str, got: usize, expected: usize },

    #[error("backward requires a scalar root, got {shape}")]
    NonScalarRoot { shape: Shape },

    #[error("backward was already called on this tape")]
    TapeConsumed,

    #[error("average pooling kernel must be odd, got {k}")]
    EvenKernel { k: usize },

    #[error("non-finite value at element {index} in {ctx}")]
    NonFinite { ctx: &'static str, index: usize },

    #[error("{0}")]
    InvalidArg(String),

    #[error("spatial size {h}x{w} not divisible by 4; pad to {need_h}x{need_w}")]
    Indivisible { h: usize, w: usize, need_h: usize, need_w: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

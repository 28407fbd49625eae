//! Minimal reverse-mode automatic differentiation, parameter storage and AdamW.

mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{adamw_step, clip_global_norm, OptimState};
pub use params::{Binder, ParamId, ParamSet};
pub use schedule::{cosine_alpha, cosine_lr};
pub use tape::{Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("index {index} out of range for {op} (length {len})")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::ShapeMismatch { op, detail: detail.into() }
    }
}

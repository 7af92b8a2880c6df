//! Reverse-mode automatic differentiation over dense fp64 tensors.
//!
//! Values are recorded on a [`Tape`] as ops execute; [`Tape::backward`]
//! replays them in reverse. Apart from [`Tape::broadcast_mul`] and the
//! bias row of [`Tape::linear`]/[`Tape::conv2d`], ops demand exact shapes.

mod adam;
pub mod gradcheck;
pub mod checkpoint;
mod kernels;
mod lstm;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig, AdamState};
pub use lstm::{lstm_cell, LstmWeights};
pub use params::{BoundParams, ParamStore};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: &'static str },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

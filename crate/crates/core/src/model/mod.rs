//! Event-prediction network: convolutional encoder, an attention recurrence
//! that places a mask on the feature map for every future step, and an event
//! recurrence that reads the masked features. Three variants share the code:
//! trajectory-supervised Gaussian masks, free spatial-softmax masks, and no
//! mask at all.

mod config;
mod network;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::geometry::GeometryError;

pub use config::{ConvSpec, EventHeadSpec, HeadKind, ModelConfig, Variant};
pub use network::{EncodedImage, Encoded, ForwardOutput, ForwardVars, Model};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {what} of shape {expected:?}, got {found:?}")]
    Shape { what: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("{op} is not available for the {variant} variant")]
    Variant { op: &'static str, variant: Variant },
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[cfg(test)]
mod tests;

//! Tensor layers, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod conv;
mod graph;
mod layers;

use alloc::vec::Vec;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var};
pub use layers::{
    batchnorm, conv2d, conv_transpose2d, fully_connected, leaky_relu, softmax, LayerKind, LayerParams, ParamId, Slot,
    BN_EPS, LEAKY_SLOPE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(&'static str),
    #[error("invalid layer configuration: {0}")]
    Config(&'static str),
    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(&'static str),
    #[error("density probability below floor in channel {channel} at value {value}")]
    ProbabilityFloor { channel: usize, value: f64 },
}

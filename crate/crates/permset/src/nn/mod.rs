//! Dense-tensor algebra, differentiable layers, Adam, gradient checking and
//! the checkpoint container. Everything is f64 and single-threaded; the
//! networks here are small enough that exactness matters more than speed.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, CheckpointError,
    CHECKPOINT_MAGIC,
};
pub use gradcheck::gradient_check;
pub use layers::{Affine, Conv2d, Flatten, Layer, MaxPool2d, Network, Relu, Sigmoid, Softmax};
pub use tensor::Tensor;

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    /// Input shape does not match what a layer expects.
    ShapeMismatch {
        layer: String,
        expected: String,
        got: Vec<usize>,
    },
    /// backward called without a preceding forward on the same layer.
    BackwardBeforeForward { layer: String },
    /// Optimizer state or gradient does not shape-match its parameter.
    ParamShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch { layer, expected, got } => {
                write!(f, "shape mismatch in layer {layer}: expected {expected}, got {got:?}")
            }
            NnError::BackwardBeforeForward { layer } => {
                write!(f, "backward called before forward on layer {layer}")
            }
            NnError::ParamShapeMismatch { expected, got } => {
                write!(f, "parameter shape mismatch: expected {expected:?}, got {got:?}")
            }
        }
    }
}

impl std::error::Error for NnError {}

/// Numerically stable softmax (max subtraction). Output sums to 1 and every
/// entry is strictly inside (0, 1) for finite inputs of length >= 2.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability clamp applied before any log.
pub const PROB_EPS: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

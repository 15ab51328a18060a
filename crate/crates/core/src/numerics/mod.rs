//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! This is deliberately the smallest substrate the encoder and task heads
//! need: row-major tensors, a per-forward-pass tape, the SGD optimizer and
//! the two loss functions. Weights and activations are `f32` in production;
//! everything is generic over [`Scalar`] so tests can shadow-compute at
//! `f64` for tight gradient tolerances.

pub mod gradcheck;
mod loss;
mod ops;
mod sgd;
mod tensor;


pub use sgd::{sgd_step, SgdConfig};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("missing gradient on parameter {index}")]
    MissingGradient { index: usize },
    #[error("backward requires a scalar tensor, got shape {shape:?}")]
    NotAScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// SeLU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SeLU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Probability clamp applied inside the binary cross entropy loss.
pub const BCE_EPSILON: f64 = 1e-7;

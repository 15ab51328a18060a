//! Stochastic gradient descent with weight decay.

use super::tensor::{Scalar, Tensor};
use super::{NumericsError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        assert!(learning_rate >= 0.0 && weight_decay >= 0.0);
        Self {
            learning_rate,
            weight_decay,
        }
    }
}

/// One update: p <- p - lr * (grad + weight_decay * p), then grads are
/// cleared. Fails without touching any parameter if a gradient is missing.
pub fn sgd_step<T: Scalar>(params: &[Tensor<T>], config: &SgdConfig) -> Result<()> {
    for (index, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(NumericsError::MissingGradient { index });
        }
    }
    let lr = T::from_f64_lossy(config.learning_rate);
    let wd = T::from_f64_lossy(config.weight_decay);
    for p in params {
        let grad = p.grad().expect("checked above");
        let mut data = p.data();
        for (v, g) in data.iter_mut().zip(&grad) {
            *v = *v - lr * (*g + wd * *v);
        }
        p.set_data(data)?;
        p.zero_grad();
    }
    Ok(())
}

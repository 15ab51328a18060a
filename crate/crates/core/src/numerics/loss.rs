//! The two training losses: categorical cross entropy over raw logits and
//! elementwise binary cross entropy over post-softmax probabilities.

use super::tensor::{Scalar, Tensor};
use super::{NumericsError, Result, BCE_EPSILON};

impl<T: Scalar> Tensor<T> {
    /// -log softmax(logits)[target], computed via the stable log-sum-exp.
    pub fn cross_entropy_loss(&self, target_index: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_loss",
                detail: format!("expected rank 1 logits, got {s:?}"),
            });
        }
        let c = s[0];
        if target_index >= c {
            return Err(NumericsError::IndexOutOfRange {
                index: target_index,
                len: c,
            });
        }
        let (loss, probs) = self.with_data(|x| {
            let max = x.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let mut sum = T::zero();
            let mut probs = vec![T::zero(); c];
            for (p, v) in probs.iter_mut().zip(x) {
                let e = (*v - max).exp();
                *p = e;
                sum = sum + e;
            }
            for p in probs.iter_mut() {
                *p = *p / sum;
            }
            let lse = max + sum.ln();
            (lse - x[target_index], probs)
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                if !p.requires_grad() {
                    return;
                }
                let mut dx = probs;
                dx[target_index] = dx[target_index] - T::one();
                for d in dx.iter_mut() {
                    *d = *d * g[0];
                }
                p.accum_grad(&dx);
            }),
        ))
    }

    /// Mean over elements of -[t*log p + (1-t)*log(1-p)], with probabilities
    /// clamped to [1e-7, 1 - 1e-7]. Inputs are expected post-softmax.
    pub fn binary_cross_entropy_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "binary_cross_entropy_loss",
                detail: format!("{:?} vs {:?}", self.shape(), target.shape()),
            });
        }
        let eps = T::from_f64_lossy(BCE_EPSILON);
        let hi = T::one() - eps;
        let n = self.len().max(1);
        let inv_n = T::from_f64_lossy(1.0 / n as f64);
        let (loss, clamped) = self.with_data(|p| {
            target.with_data(|t| {
                let mut total = T::zero();
                let mut clamped = Vec::with_capacity(p.len());
                for (pi, ti) in p.iter().zip(t) {
                    let pc = pi.max(eps).min(hi);
                    clamped.push(pc);
                    total = total - (*ti * pc.ln() + (T::one() - *ti) * (T::one() - pc).ln());
                }
                (total * inv_n, clamped)
            })
        });
        let (pp, pt) = (self.clone(), target.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone(), target.clone()],
            Box::new(move |g| {
                if !pp.requires_grad() {
                    return;
                }
                let dx = pp.with_data(|p| {
                    pt.with_data(|t| {
                        p.iter()
                            .zip(t)
                            .zip(&clamped)
                            .map(|((pi, ti), pc)| {
                                // Zero gradient where the clamp is active.
                                if *pi <= eps || *pi >= hi {
                                    T::zero()
                                } else {
                                    g[0] * inv_n * (*pc - *ti) / (*pc * (T::one() - *pc))
                                }
                            })
                            .collect::<Vec<T>>()
                    })
                });
                pp.accum_grad(&dx);
            }),
        ))
    }
}

//! Central finite-difference gradient oracle.
//!
//! Lives in the library so every test layer (module tests, integration
//! tests, the acceptance suite) can check analytic gradients against an
//! independent numeric estimate. Never used by the forward/backward path
//! itself.

use super::tensor::{Scalar, Tensor};

/// Estimates d loss / d param for every element of every parameter by
/// central differences: (f(p+h) - f(p-h)) / 2h. `f` must re-run the full
/// forward pass and return the scalar loss; it must be deterministic.
pub fn finite_difference_gradients<T: Scalar>(
    params: &[Tensor<T>],
    h: f64,
    mut f: impl FnMut() -> T,
) -> Vec<Vec<T>> {
    let hv = T::from_f64_lossy(h);
    let two_h = T::from_f64_lossy(2.0 * h);
    params
        .iter()
        .map(|p| {
            let base = p.data();
            let mut grad = vec![T::zero(); base.len()];
            for i in 0..base.len() {
                let mut up = base.clone();
                up[i] = up[i] + hv;
                p.set_data(up).expect("same length");
                let f_plus = f();

                let mut down = base.clone();
                down[i] = down[i] - hv;
                p.set_data(down).expect("same length");
                let f_minus = f();

                grad[i] = (f_plus - f_minus) / two_h;
            }
            p.set_data(base).expect("same length");
            grad
        })
        .collect()
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps comparisons of
/// near-zero gradients from exploding into meaningless ratios.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T, floor: f64) -> f64 {
    let a = analytic.to_f64().unwrap_or(f64::NAN);
    let n = numeric.to_f64().unwrap_or(f64::NAN);
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between analytic gradients (already accumulated
/// on `params` by a backward pass) and finite-difference estimates.
pub fn max_gradient_error<T: Scalar>(params: &[Tensor<T>], numeric: &[Vec<T>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (p, num) in params.iter().zip(numeric) {
        let analytic = p.grad().expect("parameter missing gradient");
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(relative_error(*a, *n, floor));
        }
    }
    worst
}

//! Finite-difference gradient verification.
//!
//! These helpers never touch a backward pass: they estimate gradients by
//! perturbing one element at a time and re-running a caller-supplied
//! forward closure, which makes them an independent oracle for every
//! analytic gradient in the crate. Run them at `f64`; central differences
//! at `f32` drown in rounding noise.

use crate::tensor::{Scalar, Tensor};

/// Central-difference step. Small enough that the O(eps^2) truncation error
/// sits far below the comparison tolerance at f64, large enough to stay
/// clear of cancellation.
pub const EPSILON: f64 = 1e-5;

/// Comparison tolerance for analytic-vs-numeric gradients at f64.
pub const TOLERANCE: f64 = 1e-4;

/// Numeric gradient of `f` with respect to every element of `t`, by central
/// differences: (f(x + eps) - f(x - eps)) / (2 eps).
pub fn numerical_gradient<T, F>(t: &Tensor<T>, mut f: F) -> Vec<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let mut probe = t.clone();
    let mut grad = vec![0.0; t.numel()];
    for i in 0..t.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::from_f64_lossy(EPSILON);
        let plus = f(&probe);
        probe.data_mut()[i] = orig - T::from_f64_lossy(EPSILON);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * EPSILON);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with the
/// denominator guarded at 1e-3 so near-zero entries are effectively
/// compared absolutely (at TOLERANCE * 1e-3), above the finite-difference
/// noise floor.
pub fn max_relative_error<T: Scalar>(numeric: &[f64], analytic: &[T]) -> f64 {
    assert_eq!(numeric.len(), analytic.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (n, a) in numeric.iter().zip(analytic) {
        let a = a.to_f64_lossy();
        let denom = n.abs().max(a.abs()).max(1e-3);
        worst = worst.max((n - a).abs() / denom);
    }
    worst
}

/// Convenience wrapper: numeric gradient of `f` at `t` compared against an
/// analytic gradient, returning the worst relative error.
pub fn check_param_gradient<T, F>(t: &Tensor<T>, analytic: &[T], f: F) -> f64
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let numeric = numerical_gradient(t, f);
    max_relative_error(&numeric, analytic)
}

/// Like [`check_param_gradient`] but only probes the given element indices,
/// for tensors too large to difference exhaustively.
pub fn check_param_gradient_at<T, F>(
    t: &Tensor<T>,
    analytic: &[T],
    indices: &[usize],
    mut f: F,
) -> f64
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let mut probe = t.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::from_f64_lossy(EPSILON);
        let plus = f(&probe);
        probe.data_mut()[i] = orig - T::from_f64_lossy(EPSILON);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let n = (plus - minus) / (2.0 * EPSILON);
        let a = analytic[i].to_f64_lossy();
        let denom = n.abs().max(a.abs()).max(1e-3);
        worst = worst.max((n - a).abs() / denom);
    }
    worst
}

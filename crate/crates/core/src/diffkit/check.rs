//! Central finite differences, used as the oracle for every hand-written backward pass.

use super::matrix::Matrix;

/// Central-difference gradient of `f` at `x`, one entry at a time.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, eps: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest entrywise relative error between an analytic and a numeric gradient.
///
/// Each entry is compared against `max(|a|, |n|, floor)` where
/// `floor = 1e-6 · max(1, ‖n‖∞)`, so entries that are numerically zero relative
/// to the gradient's own scale do not blow up the ratio.
pub fn max_rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert!(analytic.same_shape(numeric), "gradient shapes differ");
    let floor = 1e-6 * numeric.max_abs().max(1.0);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

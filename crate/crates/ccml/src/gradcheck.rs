//! Central finite-difference utilities for checking analytic gradients.
//!
//! These helpers only re-evaluate a loss closure at perturbed points; they
//! share no code with the analytic gradient paths they are used to check.

/// Central-difference gradient of `loss` w.r.t. every coordinate of `base`.
///
/// The closure receives the full (perturbed) coordinate vector and must
/// return the scalar loss; it is called `2 * base.len()` times.
pub fn numeric_gradient<F>(base: &[f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = base.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        point[i] = base[i] + step;
        let up = loss(&point);
        point[i] = base[i] - step;
        let down = loss(&point);
        point[i] = base[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Relative error with an absolute floor on the denominator, so comparisons
/// between near-zero gradients degrade into an absolute tolerance instead of
/// dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum [`relative_error`] over two gradient vectors of equal length.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

//! Swapping ranking loss and cross-network small-loss sample selection.
//!
//! Each network ranks the mini-batch by `B = bce + gamma * lasso` and keeps
//! the `R` lowest-loss samples; the selections are then exchanged, so each
//! network is updated only on samples the other network trusts.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cross-exchanged retention decision for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapDecision {
    /// Batch rows network `f` trains on: the `R` smallest `B_g` values.
    pub selected_for_f: Vec<usize>,
    /// Batch rows network `g` trains on: the `R` smallest `B_f` values.
    pub selected_for_g: Vec<usize>,
    /// Complement of `selected_for_f`, ascending.
    pub excluded_for_f: Vec<usize>,
    /// Complement of `selected_for_g`, ascending.
    pub excluded_for_g: Vec<usize>,
    /// Retained count `R = ceil(retain_fraction * batch)`.
    pub r: usize,
}

/// Per-sample swapping ranking loss `B_i = bce_i + gamma * lasso_i`.
pub fn swapping_loss<S: Scalar>(
    bce: &Array1<S>,
    lasso_total: &Array1<S>,
    gamma: S,
) -> Result<Array1<S>> {
    if bce.len() != lasso_total.len() {
        return Err(Error::validation(format!(
            "per-sample loss lengths differ: {} vs {}",
            bce.len(),
            lasso_total.len()
        )));
    }
    if gamma < S::zero() {
        return Err(Error::validation("gamma must be non-negative"));
    }
    Ok(bce + &(lasso_total * gamma))
}

/// Select the `R` lowest-loss rows per network and exchange the selections.
///
/// Ties are broken by ascending row index, so the decision is deterministic.
pub fn select_and_swap<S: Scalar>(
    b_f: &Array1<S>,
    b_g: &Array1<S>,
    retain_fraction: f64,
) -> Result<SwapDecision> {
    let batch = b_f.len();
    if batch == 0 {
        return Err(Error::validation("cannot select from an empty batch"));
    }
    if b_f.len() != b_g.len() {
        return Err(Error::validation(format!(
            "per-sample loss lengths differ: {} vs {}",
            b_f.len(),
            b_g.len()
        )));
    }
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "retain_fraction must lie in (0, 1], got {retain_fraction}"
        )));
    }
    for (name, values) in [("B_f", b_f), ("B_g", b_g)] {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "{name} contains a non-finite value"
            )));
        }
    }

    let r = ((retain_fraction * batch as f64).ceil() as usize).min(batch);

    let smallest = |b: &Array1<S>| -> Vec<usize> {
        let mut order: Vec<usize> = (0..batch).collect();
        order.sort_by(|&a, &c| {
            b[a].partial_cmp(&b[c])
                .expect("finite values compare")
                .then(a.cmp(&c))
        });
        order.truncate(r);
        order
    };
    let selected_for_f = smallest(b_g);
    let selected_for_g = smallest(b_f);
    let complement = |selected: &[usize]| -> Vec<usize> {
        let mut keep = vec![true; batch];
        for &i in selected {
            keep[i] = false;
        }
        (0..batch).filter(|&i| keep[i]).collect()
    };
    let excluded_for_f = complement(&selected_for_f);
    let excluded_for_g = complement(&selected_for_g);

    Ok(SwapDecision {
        selected_for_f,
        selected_for_g,
        excluded_for_f,
        excluded_for_g,
        r,
    })
}

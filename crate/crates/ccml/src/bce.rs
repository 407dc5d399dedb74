//! Per-sample binary cross-entropy on sigmoid probabilities.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
/// logarithms are taken.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-sample losses together with the gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct BceReport<S: Scalar> {
    /// Mean-over-classes cross-entropy per sample, length `batch`.
    pub per_sample: Array1<S>,
    /// Gradient of each sample's loss w.r.t. its logits: `(p - y) / V`.
    pub grad_logits: Array2<S>,
}

/// Binary cross-entropy of `probabilities` against binary `labels`.
///
/// Loss per sample is the mean over the `V` classes, so downstream trade-off
/// weights keep the same meaning regardless of the number of classes.
pub fn bce<S: Scalar>(probabilities: &Array2<S>, labels: &Array2<u8>) -> Result<BceReport<S>> {
    if probabilities.dim() != labels.dim() {
        return Err(Error::validation(format!(
            "probability shape {:?} does not match label shape {:?}",
            probabilities.dim(),
            labels.dim()
        )));
    }
    let (batch, classes) = probabilities.dim();
    if classes == 0 {
        return Err(Error::validation("bce requires at least one class"));
    }
    check_binary(labels)?;

    let lo = S::cast(PROB_CLAMP);
    let hi = S::one() - lo;
    let inv_classes = S::one() / S::cast(classes as f64);

    let mut per_sample = Array1::zeros(batch);
    let mut grad = Array2::zeros((batch, classes));
    for i in 0..batch {
        let mut acc = S::zero();
        for j in 0..classes {
            let p = probabilities[(i, j)].max(lo).min(hi);
            if labels[(i, j)] == 1 {
                acc += p.ln();
                grad[(i, j)] = (p - S::one()) * inv_classes;
            } else {
                acc += (S::one() - p).ln();
                grad[(i, j)] = p * inv_classes;
            }
        }
        per_sample[i] = -acc * inv_classes;
    }
    Ok(BceReport {
        per_sample,
        grad_logits: grad,
    })
}

pub(crate) fn check_binary(labels: &Array2<u8>) -> Result<()> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::validation("labels must be binary (0 or 1)"));
    }
    Ok(())
}

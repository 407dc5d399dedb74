//! Pairwise ranking errors and the grouped ranking loss that scores
//! label-noise evidence per sample, split into a missing-label and a
//! wrong-label term.

use ndarray::Array2;

use crate::bce::check_binary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hinge ranking error between an assigned class prediction `p_assigned` and
/// an unassigned class prediction `p_unassigned`:
/// `max(0, 2 (p_unassigned - p_assigned) + 1)`.
///
/// Zero exactly when the assigned class leads by a margin of at least `0.5`.
pub fn ranking_error<S: Scalar>(p_assigned: S, p_unassigned: S) -> Result<S> {
    for p in [p_assigned, p_unassigned] {
        if !(p >= S::zero() && p <= S::one()) {
            return Err(Error::validation(format!(
                "class predictions must lie in [0, 1], got {p}"
            )));
        }
    }
    Ok((S::cast(2.0) * (p_unassigned - p_assigned) + S::one()).max(S::zero()))
}

/// Squared ranking errors of one sample over all (assigned, unassigned)
/// class pairs.
#[derive(Debug, Clone)]
pub struct RankingErrorMatrix<S: Scalar> {
    /// `eps[(r, c)]` is the squared hinge for `(assigned[r], unassigned[c])`.
    pub eps: Array2<S>,
    /// Class indices carrying label 1, ascending.
    pub assigned: Vec<usize>,
    /// Class indices carrying label 0, ascending.
    pub unassigned: Vec<usize>,
}

/// Grouped ranking loss of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleLasso<S: Scalar> {
    /// Evidence that labels are missing: one group per unassigned class,
    /// aggregated over the assigned classes it outranks.
    pub missing_term: S,
    /// Evidence that assigned labels are wrong: one group per assigned
    /// class, aggregated over the unassigned classes outranking it.
    pub wrong_term: S,
    /// `alpha * missing_term + beta * wrong_term`.
    pub total: S,
    /// True when the sample has all or no classes assigned; both terms are
    /// zero in that case because no ranking pair exists.
    pub degenerate: bool,
}

/// Batch output of [`lasso`].
#[derive(Debug, Clone)]
pub struct LassoBatch<S: Scalar> {
    pub per_sample: Vec<SampleLasso<S>>,
    /// Unweighted per-(sample, class) evidence scores consumed by the
    /// flipping stage: `sqrt` of the summed squared hinges of every pair the
    /// class participates in.
    pub class_scores: Array2<S>,
}

impl<S: Scalar> LassoBatch<S> {
    /// Per-sample totals as an array, in batch order.
    pub fn totals(&self) -> ndarray::Array1<S> {
        self.per_sample.iter().map(|s| s.total).collect()
    }
}

/// Ranking errors of a single sample given its probabilities and labels.
pub fn ranking_errors<S: Scalar>(
    probabilities: &[S],
    labels: &[u8],
) -> Result<RankingErrorMatrix<S>> {
    let assigned: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == 1).collect();
    let unassigned: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == 0).collect();
    let mut eps = Array2::zeros((assigned.len(), unassigned.len()));
    for (r, &c) in assigned.iter().enumerate() {
        for (s, &u) in unassigned.iter().enumerate() {
            let e = ranking_error(probabilities[c], probabilities[u])?;
            eps[(r, s)] = e * e;
        }
    }
    Ok(RankingErrorMatrix {
        eps,
        assigned,
        unassigned,
    })
}

/// Grouped ranking loss per sample.
///
/// For every unassigned class the squared hinges against all assigned
/// classes are summed and rooted (missing-label groups, weighted `alpha`);
/// for every assigned class the squared hinges against all unassigned
/// classes are summed and rooted (wrong-label groups, weighted `beta`).
pub fn lasso<S: Scalar>(
    probabilities: &Array2<S>,
    labels: &Array2<u8>,
    alpha: S,
    beta: S,
) -> Result<LassoBatch<S>> {
    if probabilities.dim() != labels.dim() {
        return Err(Error::validation(format!(
            "probability shape {:?} does not match label shape {:?}",
            probabilities.dim(),
            labels.dim()
        )));
    }
    check_binary(labels)?;
    if !(alpha >= S::zero() && beta >= S::zero()) {
        return Err(Error::validation("alpha and beta must be non-negative"));
    }

    let (batch, classes) = probabilities.dim();
    let mut per_sample = Vec::with_capacity(batch);
    let mut class_scores = Array2::zeros((batch, classes));
    for i in 0..batch {
        let probs_row: Vec<S> = probabilities.row(i).to_vec();
        let labels_row: Vec<u8> = labels.row(i).to_vec();
        let errors = ranking_errors(&probs_row, &labels_row)?;
        let degenerate = errors.assigned.is_empty() || errors.unassigned.is_empty();

        let mut missing = S::zero();
        for (s, &u) in errors.unassigned.iter().enumerate() {
            let group: S = (0..errors.assigned.len()).map(|r| errors.eps[(r, s)]).sum();
            let score = group.sqrt();
            class_scores[(i, u)] = score;
            missing += score;
        }
        let mut wrong = S::zero();
        for (r, &c) in errors.assigned.iter().enumerate() {
            let group: S = (0..errors.unassigned.len())
                .map(|s| errors.eps[(r, s)])
                .sum();
            let score = group.sqrt();
            class_scores[(i, c)] = score;
            wrong += score;
        }
        per_sample.push(SampleLasso {
            missing_term: missing,
            wrong_term: wrong,
            total: alpha * missing + beta * wrong,
            degenerate,
        });
    }
    Ok(LassoBatch {
        per_sample,
        class_scores,
    })
}

//! Label correction: select the cells both networks agree are mislabeled
//! (noisy class selector) and flip the highest-evidence ones within a budget
//! (noisy class flipper).

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bce::{bce, BceReport};
use crate::error::{Error, Result};
use crate::grouplasso::{lasso, LassoBatch};
use crate::scalar::Scalar;
use crate::LabelMatrix;

/// Direction of a label flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipDirection {
    /// A missing label was added.
    #[serde(rename = "0to1")]
    ZeroToOne,
    /// A wrong label was removed.
    #[serde(rename = "1to0")]
    OneToZero,
}

/// A label cell both networks agree is wrong, with its combined evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipCandidate {
    /// Row inside the current batch.
    pub row: usize,
    /// Dataset-wide sample id, used for deterministic tie-breaking and logs.
    pub sample: u64,
    pub class: usize,
    /// Sum of both networks' per-class ranking-error scores at this cell.
    pub score: f64,
    pub direction: FlipDirection,
}

/// One applied flip, as appended to the run report (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub epoch: usize,
    pub batch: usize,
    pub sample: u64,
    pub class: usize,
    pub direction: FlipDirection,
    pub score: f64,
}

/// Cells where both networks' thresholded predictions agree with each other
/// and contradict the current label, sorted by descending combined evidence
/// (ties broken by ascending sample id, then class).
pub fn select_candidates<S: Scalar>(
    probs_f: &Array2<S>,
    probs_g: &Array2<S>,
    labels: &LabelMatrix,
    scores_f: &Array2<S>,
    scores_g: &Array2<S>,
    ids: &[u64],
    threshold: f64,
) -> Result<Vec<FlipCandidate>> {
    let dim = labels.dim();
    for (name, mat) in [("probs_f", probs_f), ("probs_g", probs_g)] {
        if mat.dim() != dim {
            return Err(Error::validation(format!(
                "{name} shape {:?} does not match labels {:?}",
                mat.dim(),
                dim
            )));
        }
    }
    for (name, mat) in [("scores_f", scores_f), ("scores_g", scores_g)] {
        if mat.dim() != dim {
            return Err(Error::validation(format!(
                "{name} shape {:?} does not match labels {:?}",
                mat.dim(),
                dim
            )));
        }
    }
    if ids.len() != dim.0 {
        return Err(Error::validation(format!(
            "{} ids for a batch of {}",
            ids.len(),
            dim.0
        )));
    }
    crate::bce::check_binary(labels)?;

    let thr = S::cast(threshold);
    let mut candidates = Vec::new();
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let pred_f = u8::from(probs_f[(i, j)] >= thr);
            let pred_g = u8::from(probs_g[(i, j)] >= thr);
            if pred_f != pred_g || pred_f == labels[(i, j)] {
                continue;
            }
            let score = (scores_f[(i, j)] + scores_g[(i, j)])
                .to_f64()
                .expect("score converts to f64");
            candidates.push(FlipCandidate {
                row: i,
                sample: ids[i],
                class: j,
                score,
                direction: if labels[(i, j)] == 0 {
                    FlipDirection::ZeroToOne
                } else {
                    FlipDirection::OneToZero
                },
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.sample.cmp(&b.sample))
            .then(a.class.cmp(&b.class))
    });
    Ok(candidates)
}

/// Flip the top `ceil(flip_rate * candidates)` candidates.
///
/// Returns the corrected label matrix and the applied flips in order.
pub fn flip(
    labels: &LabelMatrix,
    candidates: &[FlipCandidate],
    flip_rate: f64,
) -> Result<(LabelMatrix, Vec<FlipCandidate>)> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::validation(format!(
            "flip_rate must lie in [0, 1], got {flip_rate}"
        )));
    }
    let budget = (flip_rate * candidates.len() as f64).ceil() as usize;
    let mut corrected = labels.clone();
    let mut applied = Vec::with_capacity(budget.min(candidates.len()));
    for candidate in candidates.iter().take(budget) {
        corrected[(candidate.row, candidate.class)] ^= 1;
        applied.push(candidate.clone());
    }
    Ok((corrected, applied))
}

/// Recompute both networks' cross-entropy and ranking losses against the
/// corrected labels; the outputs feed the swap selection and the gradient
/// step.
#[allow(clippy::type_complexity)]
pub fn recompute_after_flip<S: Scalar>(
    probs_f: &Array2<S>,
    probs_g: &Array2<S>,
    corrected_labels: &LabelMatrix,
    alpha: S,
    beta: S,
) -> Result<((BceReport<S>, LassoBatch<S>), (BceReport<S>, LassoBatch<S>))> {
    let f = (
        bce(probs_f, corrected_labels)?,
        lasso(probs_f, corrected_labels, alpha, beta)?,
    );
    let g = (
        bce(probs_g, corrected_labels)?,
        lasso(probs_g, corrected_labels, alpha, beta)?,
    );
    Ok((f, g))
}

/// Append flip records as JSON lines.
pub fn append_flip_log(records: &[FlipRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn disagreement_yields_no_candidates() {
        let probs_f = array![[0.9, 0.1]];
        let probs_g = array![[0.1, 0.9]];
        let labels = array![[0u8, 0]];
        let scores = array![[1.0, 1.0]];
        let cands = select_candidates(
            &probs_f, &probs_g, &labels, &scores, &scores, &[0], 0.5,
        )
        .unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn agreement_against_label_is_a_candidate() {
        let probs = array![[0.9]];
        let labels = array![[0u8]];
        let scores = array![[0.7]];
        let cands =
            select_candidates(&probs, &probs.clone(), &labels, &scores, &scores, &[3], 0.5)
                .unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].direction, FlipDirection::ZeroToOne);
        assert_eq!(cands[0].sample, 3);
        assert!((cands[0].score - 1.4).abs() < 1e-12);
    }

    #[test]
    fn one_sided_confidence_is_not_enough() {
        let probs_f = array![[0.9]];
        let probs_g = array![[0.2]];
        let labels = array![[0u8]];
        let scores = array![[0.7]];
        let cands = select_candidates(
            &probs_f, &probs_g, &labels, &scores, &scores, &[0], 0.5,
        )
        .unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn candidates_sorted_by_score_then_id_then_class() {
        let probs = array![[0.9, 0.9], [0.9, 0.1]];
        let labels = array![[0u8, 0], [0, 1]];
        let scores_f = array![[0.5, 0.5], [0.2, 0.9]];
        let scores_g = array![[0.5, 0.5], [0.8, 0.1]];
        let cands = select_candidates(
            &probs,
            &probs.clone(),
            &labels,
            &scores_f,
            &scores_g,
            &[10, 11],
            0.5,
        )
        .unwrap();
        // combined scores: (10,0)=1.0, (10,1)=1.0, (11,0)=1.0, (11,1)=1.0
        let order: Vec<(u64, usize)> = cands.iter().map(|c| (c.sample, c.class)).collect();
        assert_eq!(order, vec![(10, 0), (10, 1), (11, 0), (11, 1)]);
    }

    #[test]
    fn budget_rounds_up_and_prefers_high_scores() {
        let labels = array![[0u8, 0]];
        let candidates = vec![
            FlipCandidate {
                row: 0,
                sample: 0,
                class: 1,
                score: 2.0,
                direction: FlipDirection::ZeroToOne,
            },
            FlipCandidate {
                row: 0,
                sample: 0,
                class: 0,
                score: 1.0,
                direction: FlipDirection::ZeroToOne,
            },
        ];
        let (corrected, applied) = flip(&labels, &candidates, 0.05).unwrap();
        assert_eq!(applied.len(), 1);
        assert_eq!(applied[0].class, 1);
        assert_eq!(corrected, array![[0u8, 1]]);
    }

    #[test]
    fn no_candidates_changes_nothing() {
        let labels = array![[1u8, 0]];
        let (corrected, applied) = flip(&labels, &[], 0.05).unwrap();
        assert_eq!(corrected, labels);
        assert!(applied.is_empty());
    }

    #[test]
    fn full_rate_flips_all_candidates() {
        let labels = array![[0u8, 1]];
        let candidates = vec![
            FlipCandidate {
                row: 0,
                sample: 0,
                class: 0,
                score: 1.0,
                direction: FlipDirection::ZeroToOne,
            },
            FlipCandidate {
                row: 0,
                sample: 0,
                class: 1,
                score: 0.5,
                direction: FlipDirection::OneToZero,
            },
        ];
        let (corrected, applied) = flip(&labels, &candidates, 1.0).unwrap();
        assert_eq!(applied.len(), 2);
        assert_eq!(corrected, array![[1u8, 0]]);
    }

    #[test]
    fn recompute_is_identity_without_flips() {
        let probs_f = array![[0.8, 0.3], [0.4, 0.9]];
        let probs_g = array![[0.7, 0.2], [0.5, 0.6]];
        let labels = array![[1u8, 0], [0, 1]];
        let before_f = bce(&probs_f, &labels).unwrap();
        let ((after_f, _), _) =
            recompute_after_flip(&probs_f, &probs_g, &labels, 1.0, 1.0).unwrap();
        assert_eq!(before_f.per_sample, after_f.per_sample);
    }

    #[test]
    fn correcting_flip_reduces_bce_for_both_networks() {
        let probs_f = array![[0.9, 0.6]];
        let probs_g = array![[0.8, 0.7]];
        let labels = array![[0u8, 1]];
        let corrected = array![[1u8, 1]];
        let before_f = bce(&probs_f, &labels).unwrap().per_sample[0];
        let before_g = bce(&probs_g, &labels).unwrap().per_sample[0];
        let ((after_f, _), (after_g, _)) =
            recompute_after_flip(&probs_f, &probs_g, &corrected, 1.0, 1.0).unwrap();
        assert!(after_f.per_sample[0] < before_f);
        assert!(after_g.per_sample[0] < before_g);
    }

    #[test]
    fn corrected_class_ranking_errors_do_not_increase() {
        // both networks rank class 0 high while the label says 0; flipping it
        // to 1 turns those high predictions from evidence into agreement
        let probs_f: Array2<f64> = array![[0.9, 0.4, 0.2]];
        let probs_g: Array2<f64> = array![[0.85, 0.5, 0.3]];
        let labels = array![[0u8, 1, 0]];
        let corrected = array![[1u8, 1, 0]];
        for probs in [&probs_f, &probs_g] {
            let before = lasso(probs, &labels, 1.0, 1.0).unwrap();
            let after = lasso(probs, &corrected, 1.0, 1.0).unwrap();
            // brute-force pairwise comparison for every pair touching class 0
            let v = 3;
            for c in 0..v {
                for u in 0..v {
                    if c == u || (c != 0 && u != 0) {
                        continue;
                    }
                    let pair = |l: &LabelMatrix| -> f64 {
                        if l[(0, c)] == 1 && l[(0, u)] == 0 {
                            (2.0 * (probs[(0, u)] - probs[(0, c)]) + 1.0).max(0.0)
                        } else {
                            0.0
                        }
                    };
                    assert!(pair(&corrected) <= pair(&labels) + 1e-12);
                }
            }
            assert!(after.per_sample[0].total <= before.per_sample[0].total + 1e-12);
        }
    }

    #[test]
    fn flip_log_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flips.jsonl");
        let records = vec![FlipRecord {
            epoch: 9,
            batch: 2,
            sample: 41,
            class: 3,
            direction: FlipDirection::OneToZero,
            score: 1.25,
        }];
        append_flip_log(&records, &path).unwrap();
        append_flip_log(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: FlipRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed, records[0]);
        assert!(lines[0].contains("\"1to0\""));
    }
}

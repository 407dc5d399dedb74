//! Micro-averaged and per-class classification metrics, plus scoring of
//! noise detection and label correction against the injected-noise ground
//! truth.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::flipping::FlipRecord;
use crate::{LabelMatrix, Matrix};

/// Precision, recall, and F1 pooled over all (sample, class) cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

/// Per-class confusion summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of truth-positive cells in this class.
    pub support: u64,
}

/// Detection and correction quality against the injected-noise ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDetectionReport {
    /// (fraction of final-epoch excluded samples carrying at least one
    /// injected flip) / (base rate of such samples); `None` without
    /// exclusion events.
    pub enrichment: Option<f64>,
    pub excluded_events: usize,
    pub noisy_sample_base_rate: f64,
    /// Fraction of applied flips that corrected an injected flip; `None`
    /// when no flips happened.
    pub flip_precision: Option<f64>,
    /// Fraction of injected flips whose cell ends up corrected; `None` when
    /// no noise was injected.
    pub flip_recall: Option<f64>,
    pub flips_total: usize,
    pub flips_correcting: usize,
    pub noisy_cells: u64,
    pub cells_corrected: u64,
}

/// Full evaluation report, serialized as the metrics JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro: MicroMetrics,
    pub per_class: Vec<ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise_detection: Option<NoiseDetectionReport>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn check_shapes(pred: &LabelMatrix, truth: &LabelMatrix) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::validation(format!(
            "prediction shape {:?} does not match truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    crate::bce::check_binary(pred)?;
    crate::bce::check_binary(truth)
}

/// Micro-averaged precision, recall, and F1 (0/0 counts as 0).
pub fn micro_metrics(pred: &LabelMatrix, truth: &LabelMatrix) -> Result<MicroMetrics> {
    check_shapes(pred, truth)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(MicroMetrics {
        precision,
        recall,
        f1: f1_from(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

/// Per-class precision, recall, F1, and support (0/0 counts as 0).
pub fn per_class_metrics(pred: &LabelMatrix, truth: &LabelMatrix) -> Result<Vec<ClassMetrics>> {
    check_shapes(pred, truth)?;
    let (rows, classes) = pred.dim();
    let mut out = Vec::with_capacity(classes);
    for j in 0..classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for i in 0..rows {
            match (pred[(i, j)], truth[(i, j)]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        out.push(ClassMetrics {
            precision,
            recall,
            f1: f1_from(precision, recall),
            support: tp + fn_,
        });
    }
    Ok(out)
}

/// Apply the decision threshold to averaged probabilities.
pub fn threshold_probabilities(probs: &Matrix, threshold: f64) -> LabelMatrix {
    probs.mapv(|p| u8::from(p >= threshold))
}

/// Score noise detection (exclusion enrichment in the final epoch) and label
/// correction (flip precision/recall) against the dataset's noise mask.
pub fn noise_detection_metrics(
    excluded_per_epoch: &[Vec<usize>],
    flip_log: &[FlipRecord],
    ds: &Dataset,
) -> Result<NoiseDetectionReport> {
    let mask = ds
        .noise_mask
        .as_ref()
        .ok_or_else(|| Error::state("noise scoring requires a noise mask"))?;
    let clean = ds
        .y_clean
        .as_ref()
        .ok_or_else(|| Error::state("noise scoring requires clean labels"))?;
    let (m, v) = mask.dim();

    let noisy_sample: Vec<bool> = (0..m)
        .map(|i| (0..v).any(|j| mask[(i, j)] == 1))
        .collect();
    let noisy_samples = noisy_sample.iter().filter(|&&b| b).count();
    let base_rate = noisy_samples as f64 / m as f64;

    let final_excluded: &[usize] = excluded_per_epoch
        .last()
        .map(Vec::as_slice)
        .unwrap_or(&[]);
    let enrichment = if final_excluded.is_empty() || base_rate == 0.0 {
        None
    } else {
        let hits = final_excluded.iter().filter(|&&i| noisy_sample[i]).count();
        Some(hits as f64 / final_excluded.len() as f64 / base_rate)
    };

    // Replay the flips over the training labels to classify each one and to
    // reconstruct the final corrected matrix.
    let row_of: HashMap<u64, usize> = ds
        .ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    let mut current = ds.y.clone();
    let mut correcting = 0usize;
    for record in flip_log {
        let &row = row_of.get(&record.sample).ok_or_else(|| {
            Error::validation(format!("flip log names unknown sample {}", record.sample))
        })?;
        if record.class >= v {
            return Err(Error::validation(format!(
                "flip log names class {} of {v}",
                record.class
            )));
        }
        let cell = (row, record.class);
        current[cell] ^= 1;
        if mask[cell] == 1 && current[cell] == clean[cell] {
            correcting += 1;
        }
    }
    let noisy_cells: u64 = mask.iter().map(|&b| b as u64).sum();
    let mut corrected = 0u64;
    for i in 0..m {
        for j in 0..v {
            if mask[(i, j)] == 1 && current[(i, j)] == clean[(i, j)] {
                corrected += 1;
            }
        }
    }

    Ok(NoiseDetectionReport {
        enrichment,
        excluded_events: final_excluded.len(),
        noisy_sample_base_rate: base_rate,
        flip_precision: if flip_log.is_empty() {
            None
        } else {
            Some(correcting as f64 / flip_log.len() as f64)
        },
        flip_recall: if noisy_cells == 0 {
            None
        } else {
            Some(corrected as f64 / noisy_cells as f64)
        },
        flips_total: flip_log.len(),
        flips_correcting: correcting,
        noisy_cells,
        cells_corrected: corrected,
    })
}

/// Write the metrics report as pretty JSON.
pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Write predictions as `id,p_0..p_{V-1},yhat_0..yhat_{V-1}`.
///
/// Probabilities use shortest round-trip formatting, so metrics recomputed
/// from the file match the in-memory values bit-exactly.
pub fn write_predictions(
    ids: &[u64],
    probs: &Matrix,
    predictions: &LabelMatrix,
    path: &Path,
) -> Result<()> {
    let (m, v) = probs.dim();
    if ids.len() != m || predictions.dim() != (m, v) {
        return Err(Error::validation("prediction shapes do not line up"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("id");
    for j in 0..v {
        header.push_str(&format!(",p_{j}"));
    }
    for j in 0..v {
        header.push_str(&format!(",yhat_{j}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..m {
        write!(out, "{}", ids[i])?;
        for j in 0..v {
            write!(out, ",{}", probs[(i, j)])?;
        }
        for j in 0..v {
            write!(out, ",{}", predictions[(i, j)])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a predictions file written by [`write_predictions`].
pub fn load_predictions(path: &Path) -> Result<(Vec<u64>, Matrix, LabelMatrix)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(0, "file is empty".into()))??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "id" || !(columns.len() - 1).is_multiple_of(2) {
        return Err(parse_err(1, "unrecognized predictions header".into()));
    }
    let v = (columns.len() - 1) / 2;

    let mut ids = Vec::new();
    let mut probs_rows: Vec<f64> = Vec::new();
    let mut pred_rows: Vec<u8> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                line_no,
                format!("{} fields, expected {}", fields.len(), columns.len()),
            ));
        }
        ids.push(
            fields[0]
                .parse::<u64>()
                .map_err(|e| parse_err(line_no, format!("field `id`: {e}")))?,
        );
        for j in 0..v {
            probs_rows.push(
                fields[1 + j]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line_no, format!("field `p_{j}`: {e}")))?,
            );
        }
        for j in 0..v {
            pred_rows.push(match fields[1 + v + j] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(parse_err(
                        line_no,
                        format!("field `yhat_{j}`: expected 0 or 1, got `{other}`"),
                    ))
                }
            });
        }
    }
    let m = ids.len();
    let probs = Matrix::from_shape_vec((m, v), probs_rows)
        .map_err(|e| Error::validation(e.to_string()))?;
    let preds = LabelMatrix::from_shape_vec((m, v), pred_rows)
        .map_err(|e| Error::validation(e.to_string()))?;
    Ok((ids, probs, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, inject_noise, GenSpec};
    use crate::flipping::FlipDirection;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = array![[1u8, 0], [0, 1]];
        let m = micro_metrics(&truth.clone(), &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_micro_counts() {
        // TP = 2, FP = 1, FN = 0
        let pred = array![[1u8, 1, 1, 0]];
        let truth = array![[1u8, 1, 0, 0]];
        let m = micro_metrics(&pred, &truth).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn all_negative_prediction_uses_zero_convention() {
        let pred = array![[0u8, 0]];
        let truth = array![[1u8, 1]];
        let m = micro_metrics(&pred, &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn per_class_isolates_columns() {
        let pred = array![[1u8, 0], [1, 0]];
        let truth = array![[1u8, 1], [1, 1]];
        let per_class = per_class_metrics(&pred, &truth).unwrap();
        assert_eq!(per_class[0].f1, 1.0);
        assert_eq!(per_class[1].f1, 0.0);
        assert_eq!(per_class[1].support, 2);
    }

    #[test]
    fn zero_support_zero_prediction_class_scores_zero() {
        let pred = array![[0u8], [0]];
        let truth = array![[0u8], [0]];
        let per_class = per_class_metrics(&pred, &truth).unwrap();
        assert_eq!(per_class[0].f1, 0.0);
        assert_eq!(per_class[0].support, 0);
    }

    #[test]
    fn two_class_hand_example() {
        // class 0: TP=1, FP=1, FN=0 -> F1 = 2/3; class 1: TP=0, FP=0, FN=2 -> 0
        let pred = array![[1u8, 0], [1, 0]];
        let truth = array![[1u8, 1], [0, 1]];
        let per_class = per_class_metrics(&pred, &truth).unwrap();
        assert!((per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per_class[1].f1, 0.0);
    }

    #[test]
    fn micro_equals_pooled_per_class_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = LabelMatrix::from_shape_fn((40, 6), |_| rng.random_range(0..=1) as u8);
        let truth = LabelMatrix::from_shape_fn((40, 6), |_| rng.random_range(0..=1) as u8);
        let micro = micro_metrics(&pred, &truth).unwrap();
        let per_class = per_class_metrics(&pred, &truth).unwrap();
        let pooled_support = per_class.iter().map(|c| c.support).sum::<u64>();
        assert_eq!(micro.true_positives + micro.false_negatives, pooled_support);
    }

    #[test]
    fn micro_invariant_under_row_permutation() {
        let pred = array![[1u8, 0], [0, 1], [1, 1]];
        let truth = array![[1u8, 1], [0, 1], [0, 1]];
        let perm = [2, 0, 1];
        let permute = |m: &LabelMatrix| {
            LabelMatrix::from_shape_fn(m.dim(), |(i, j)| m[(perm[i], j)])
        };
        let a = micro_metrics(&pred, &truth).unwrap();
        let b = micro_metrics(&permute(&pred), &permute(&truth)).unwrap();
        assert_eq!(a, b);
    }

    fn noisy_dataset() -> Dataset {
        let ds = generate(&GenSpec {
            n_samples: 50,
            n_features: 5,
            n_classes: 4,
            seed: 3,
            task_seed: None,
            margin: 0.3,
            label_correlation: 0.1,
        })
        .unwrap();
        inject_noise(&ds, 40, 11).unwrap()
    }

    #[test]
    fn excluding_exactly_the_noisy_samples_maximizes_enrichment() {
        let ds = noisy_dataset();
        let mask = ds.noise_mask.as_ref().unwrap();
        let noisy: Vec<usize> = (0..50)
            .filter(|&i| (0..4).any(|j| mask[(i, j)] == 1))
            .collect();
        let base_rate = noisy.len() as f64 / 50.0;
        let report = noise_detection_metrics(&[noisy], &[], &ds).unwrap();
        assert!((report.enrichment.unwrap() - 1.0 / base_rate).abs() < 1e-12);
    }

    #[test]
    fn random_exclusion_has_unit_enrichment() {
        let ds = noisy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let excluded: Vec<usize> = (0..4000).map(|_| rng.random_range(0..50)).collect();
        let report = noise_detection_metrics(&[excluded], &[], &ds).unwrap();
        let enrichment = report.enrichment.unwrap();
        assert!(
            (enrichment - 1.0).abs() < 0.15,
            "random exclusion enrichment {enrichment}"
        );
    }

    #[test]
    fn zero_flips_reports_null_precision() {
        let ds = noisy_dataset();
        let report = noise_detection_metrics(&[vec![0, 1]], &[], &ds).unwrap();
        assert_eq!(report.flip_precision, None);
        assert_eq!(report.flips_total, 0);
    }

    #[test]
    fn correcting_flip_is_counted() {
        let ds = noisy_dataset();
        let mask = ds.noise_mask.as_ref().unwrap();
        let clean = ds.y_clean.as_ref().unwrap();
        let (mut row, mut class) = (usize::MAX, usize::MAX);
        'outer: for i in 0..50 {
            for j in 0..4 {
                if mask[(i, j)] == 1 {
                    (row, class) = (i, j);
                    break 'outer;
                }
            }
        }
        let direction = if clean[(row, class)] == 1 {
            FlipDirection::ZeroToOne
        } else {
            FlipDirection::OneToZero
        };
        let record = FlipRecord {
            epoch: 1,
            batch: 0,
            sample: ds.ids[row],
            class,
            direction,
            score: 1.0,
        };
        let report = noise_detection_metrics(&[vec![]], &[record], &ds).unwrap();
        assert_eq!(report.flip_precision, Some(1.0));
        assert_eq!(report.flips_correcting, 1);
        assert_eq!(report.cells_corrected, 1);
    }

    #[test]
    fn missing_mask_is_a_state_error() {
        let mut ds = noisy_dataset();
        ds.noise_mask = None;
        ds.noise_rate_percent = None;
        assert!(matches!(
            noise_detection_metrics(&[], &[], &ds).unwrap_err(),
            Error::State(_)
        ));
    }

    #[test]
    fn predictions_round_trip_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = Matrix::from_shape_fn((20, 3), |_| rng.random_range(0.0..1.0));
        let preds = threshold_probabilities(&probs, 0.5);
        let truth = LabelMatrix::from_shape_fn((20, 3), |_| rng.random_range(0..=1) as u8);
        let ids: Vec<u64> = (0..20).collect();
        write_predictions(&ids, &probs, &preds, &path).unwrap();
        let (ids2, probs2, preds2) = load_predictions(&path).unwrap();
        assert_eq!(ids, ids2);
        assert_eq!(probs, probs2);
        assert_eq!(preds, preds2);
        let before = micro_metrics(&preds, &truth).unwrap();
        let after = micro_metrics(&threshold_probabilities(&probs2, 0.5), &truth).unwrap();
        assert_eq!(before, after);
    }
}

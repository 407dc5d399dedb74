//! Orchestration of the collaborative per-batch pipeline and of the plain
//! single-network baseline loop.
//!
//! Per mini-batch the collaborative mode runs: forward both networks ->
//! cross-entropy and ranking losses -> (once the flip schedule activates)
//! candidate selection, label correction, and loss recomputation -> swapping
//! losses -> cross-network small-loss selection -> gradient assembly ->
//! one Adam step per network. Label corrections persist in the trainer's
//! copy of the training labels for all later epochs.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bce::{bce, BceReport};
use crate::datagen::Dataset;
use crate::discrepancy::{consistency_loss, disparity_loss, KernelSpec};
use crate::error::{Error, Result};
use crate::eval::{micro_metrics, threshold_probabilities};
use crate::flipping::{flip, recompute_after_flip, select_candidates, FlipRecord};
use crate::grouplasso::{lasso, LassoBatch};
use crate::model::{adam_step, backward, forward, init, AdamState, ModelParams};
use crate::swap::{select_and_swap, swapping_loss};
use crate::{LabelMatrix, Matrix, Real, Vector};

/// Decision threshold shared by prediction, flipping agreement, and metrics.
pub const PREDICTION_THRESHOLD: f64 = 0.5;

/// Safety cap on the subtracted disparity value. The RBF-kernel statistic is
/// bounded by 2 for equally sized sets, so the cap never binds in practice;
/// it pins the loss's lower bound regardless of kernel.
pub const DISPARITY_CAP: f64 = 2.0;

/// RNG seeds of one run: mini-batch order plus one seed per network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub net_f: u64,
    pub net_g: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Ccml,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Baseline => write!(f, "baseline"),
            Mode::Ccml => write!(f, "ccml"),
        }
    }
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the consistency term (final-logit agreement).
    pub lambda1: f64,
    /// Weight of the subtracted disparity term (tap-feature diversity).
    pub lambda2: f64,
    /// Weight of the missing-label ranking groups.
    pub alpha: f64,
    /// Weight of the wrong-label ranking groups.
    pub beta: f64,
    /// Weight of the ranking loss inside the swapping loss.
    pub gamma: f64,
    /// Fraction of each batch kept for the cross-entropy gradient.
    pub retain_fraction: f64,
    /// Fraction of agreed candidate cells flipped per batch (rounded up).
    pub flip_rate: f64,
    /// Label correction activates at epoch `ceil(flip_start_fraction *
    /// epochs)`; values above 1 disable it entirely.
    pub flip_start_fraction: f64,
    pub kernel: KernelSpec,
    pub seeds: Seeds,
    pub mode: Mode,
    /// Hidden-layer widths; input and output widths come from the data.
    pub hidden_layers: Vec<usize>,
    /// Tapped activation index; defaults to the last hidden layer.
    pub tap_index: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            retain_fraction: 0.75,
            flip_rate: 0.05,
            flip_start_fraction: 0.9,
            kernel: KernelSpec::MedianHeuristic,
            seeds: Seeds {
                data: 1,
                net_f: 2,
                net_g: 3,
            },
            mode: Mode::Ccml,
            hidden_layers: vec![32, 16],
            tap_index: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be finite and >= 0"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "retain_fraction must lie in (0, 1], got {}",
                self.retain_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::validation(format!(
                "flip_rate must lie in [0, 1], got {}",
                self.flip_rate
            )));
        }
        if !(self.flip_start_fraction >= 0.0 && self.flip_start_fraction.is_finite()) {
            return Err(Error::validation(
                "flip_start_fraction must be finite and >= 0",
            ));
        }
        self.kernel.validate()?;
        if self.hidden_layers.is_empty() {
            return Err(Error::validation("at least one hidden layer is required"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::validation("hidden layer widths must be at least 1"));
        }
        let tap = self.tap_index.unwrap_or(self.hidden_layers.len());
        if tap == 0 || tap > self.hidden_layers.len() {
            return Err(Error::validation(format!(
                "tap_index must lie in [1, {}], got {tap}",
                self.hidden_layers.len()
            )));
        }
        if self.mode == Mode::Ccml && self.seeds.net_f == self.seeds.net_g {
            return Err(Error::validation(
                "the two networks need distinct seeds to learn diverse features",
            ));
        }
        Ok(())
    }

    /// First epoch (1-based) with label correction active; past `epochs`
    /// when `flip_start_fraction > 1`.
    pub fn flip_activation_epoch(&self) -> usize {
        if self.flip_start_fraction > 1.0 {
            self.epochs + 1
        } else {
            (self.flip_start_fraction * self.epochs as f64).ceil() as usize
        }
    }

    fn arch(&self, n_features: usize, n_classes: usize) -> Vec<usize> {
        let mut arch = Vec::with_capacity(self.hidden_layers.len() + 2);
        arch.push(n_features);
        arch.extend_from_slice(&self.hidden_layers);
        arch.push(n_classes);
        arch
    }
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_f: f64,
    /// `None` in baseline mode (there is no second network).
    pub train_loss_g: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
    pub flips: usize,
    /// Fraction of this epoch's exclusion events that hit noise-carrying
    /// samples; `None` without exclusions or without a noise mask.
    pub excluded_noisy_fraction: Option<f64>,
}

/// Batch-level protocol counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchStat {
    pub epoch: usize,
    pub batch: usize,
    pub batch_len: usize,
    /// Samples carrying the cross-entropy gradient per network.
    pub selected: usize,
    pub candidates: usize,
    pub flips: usize,
}

/// Final state and full history of one training run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub mode: Mode,
    pub params_f: ModelParams<Real>,
    pub params_g: Option<ModelParams<Real>>,
    pub adam_f: AdamState<Real>,
    pub adam_g: Option<AdamState<Real>>,
    /// The (possibly corrected) labels the run trained on.
    pub training_labels: LabelMatrix,
    pub flip_log: Vec<FlipRecord>,
    pub epoch_records: Vec<EpochRecord>,
    pub batch_stats: Vec<BatchStat>,
    /// Dataset rows excluded from the cross-entropy gradient, one entry per
    /// exclusion event (both networks pooled), per epoch.
    pub excluded_per_epoch: Vec<Vec<usize>>,
}

/// Mean of the two networks' probabilities (or the single network's in
/// baseline mode).
pub fn predict_probs(
    params_f: &ModelParams<Real>,
    params_g: Option<&ModelParams<Real>>,
    x: &Matrix,
) -> Result<Matrix> {
    let probs_f = forward(params_f, x)?.probabilities;
    Ok(match params_g {
        None => probs_f,
        Some(g) => (probs_f + forward(g, x)?.probabilities) * 0.5,
    })
}

/// Ensemble probabilities of a finished run.
pub fn predict(run: &RunState, x: &Matrix) -> Result<Matrix> {
    predict_probs(&run.params_f, run.params_g.as_ref(), x)
}

pub fn train(train_ds: &Dataset, val_ds: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunState> {
    match cfg.mode {
        Mode::Baseline => train_baseline(train_ds, val_ds, cfg),
        Mode::Ccml => train_ccml(train_ds, val_ds, cfg),
    }
}

/// Train the collaborative pair.
pub fn train_ccml(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunState> {
    if cfg.mode != Mode::Ccml {
        return Err(Error::validation("config mode is not `ccml`"));
    }
    run_training(train_ds, val_ds, cfg)
}

/// Train a single network with plain cross-entropy on full batches, under
/// the same shuffling and seed discipline.
pub fn train_baseline(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunState> {
    if cfg.mode != Mode::Baseline {
        return Err(Error::validation("config mode is not `baseline`"));
    }
    run_training(train_ds, val_ds, cfg)
}

fn check_finite(value: f64, term: &'static str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, epoch, batch })
    }
}

fn gather_rows_f64(source: &Matrix, rows: &[usize]) -> Matrix {
    Array2::from_shape_fn((rows.len(), source.ncols()), |(i, j)| source[(rows[i], j)])
}

fn gather_rows_u8(source: &LabelMatrix, rows: &[usize]) -> LabelMatrix {
    Array2::from_shape_fn((rows.len(), source.ncols()), |(i, j)| source[(rows[i], j)])
}

/// Mean of the selected per-sample losses, accumulated in ascending row
/// order so that both training modes sum identically.
fn mean_over_selected(per_sample: &Vector, selected: &[usize]) -> f64 {
    let mut keep = vec![false; per_sample.len()];
    for &i in selected {
        keep[i] = true;
    }
    let mut acc = 0.0;
    for (i, &l) in per_sample.iter().enumerate() {
        if keep[i] {
            acc += l;
        }
    }
    acc / selected.len() as f64
}

/// Upstream logit gradient of the mean cross-entropy over the selected rows.
fn bce_upstream(report: &BceReport<Real>, selected: &[usize], scale: f64) -> Matrix {
    let mut upstream = Array2::zeros(report.grad_logits.dim());
    for &i in selected {
        for j in 0..upstream.ncols() {
            upstream[(i, j)] = report.grad_logits[(i, j)] * scale;
        }
    }
    upstream
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn run_training(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunState> {
    cfg.validate()?;
    train_ds.validate()?;
    let (m, v) = train_ds.y.dim();
    let d = train_ds.n_features();
    if let Some(val) = val_ds {
        val.validate()?;
        if val.n_features() != d || val.n_classes() != v {
            return Err(Error::validation(
                "validation dataset shape does not match the training dataset",
            ));
        }
    }

    let collaborative = cfg.mode == Mode::Ccml;
    let arch = cfg.arch(d, v);
    let tap = cfg.tap_index.unwrap_or(cfg.hidden_layers.len());
    let mut params_f: ModelParams<Real> = init(&arch, tap, cfg.seeds.net_f)?;
    let mut adam_f = AdamState::new(&params_f, cfg.learning_rate);
    let mut params_g = collaborative
        .then(|| init::<Real>(&arch, tap, cfg.seeds.net_g))
        .transpose()?;
    let mut adam_g = params_g
        .as_ref()
        .map(|p| AdamState::new(p, cfg.learning_rate));

    let mut training_labels = train_ds.y.clone();
    let noisy_sample: Option<Vec<bool>> = train_ds.noise_mask.as_ref().map(|mask| {
        (0..m)
            .map(|i| (0..v).any(|j| mask[(i, j)] == 1))
            .collect()
    });

    let flip_activation = cfg.flip_activation_epoch();
    let mut flip_log: Vec<FlipRecord> = Vec::new();
    let mut epoch_records = Vec::with_capacity(cfg.epochs);
    let mut batch_stats = Vec::new();
    let mut excluded_per_epoch = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seeds.data, epoch, m);
        let flips_active = collaborative && epoch >= flip_activation;
        let mut loss_sum_f = 0.0;
        let mut loss_sum_g = 0.0;
        let mut batches = 0usize;
        let mut epoch_flips = 0usize;
        let mut epoch_excluded: Vec<usize> = Vec::new();

        for (batch_idx, rows) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows_f64(&train_ds.x, rows);
            let mut yb = gather_rows_u8(&training_labels, rows);
            let batch_ids: Vec<u64> = rows.iter().map(|&r| train_ds.ids[r]).collect();

            let trace_f = forward(&params_f, &xb)?;
            let mut bce_f = bce(&trace_f.probabilities, &yb)?;

            if collaborative {
                let params_g_ref = params_g.as_ref().expect("collaborative mode has g");
                let trace_g = forward(params_g_ref, &xb)?;
                let mut bce_g = bce(&trace_g.probabilities, &yb)?;

                let need_lasso = cfg.gamma > 0.0 || flips_active;
                let mut lasso_f: Option<LassoBatch<Real>> = None;
                let mut lasso_g: Option<LassoBatch<Real>> = None;
                if need_lasso {
                    lasso_f = Some(lasso(&trace_f.probabilities, &yb, cfg.alpha, cfg.beta)?);
                    lasso_g = Some(lasso(&trace_g.probabilities, &yb, cfg.alpha, cfg.beta)?);
                }

                let mut candidates_len = 0usize;
                let mut flips_here = 0usize;
                if flips_active {
                    let scores_f = &lasso_f.as_ref().expect("lasso computed").class_scores;
                    let scores_g = &lasso_g.as_ref().expect("lasso computed").class_scores;
                    let candidates = select_candidates(
                        &trace_f.probabilities,
                        &trace_g.probabilities,
                        &yb,
                        scores_f,
                        scores_g,
                        &batch_ids,
                        PREDICTION_THRESHOLD,
                    )?;
                    candidates_len = candidates.len();
                    let (corrected, applied) = flip(&yb, &candidates, cfg.flip_rate)?;
                    if !applied.is_empty() {
                        flips_here = applied.len();
                        epoch_flips += applied.len();
                        yb = corrected;
                        for a in &applied {
                            training_labels[(rows[a.row], a.class)] = yb[(a.row, a.class)];
                            flip_log.push(FlipRecord {
                                epoch,
                                batch: batch_idx,
                                sample: a.sample,
                                class: a.class,
                                direction: a.direction,
                                score: a.score,
                            });
                        }
                        let ((new_bce_f, new_lasso_f), (new_bce_g, new_lasso_g)) =
                            recompute_after_flip(
                                &trace_f.probabilities,
                                &trace_g.probabilities,
                                &yb,
                                cfg.alpha,
                                cfg.beta,
                            )?;
                        bce_f = new_bce_f;
                        bce_g = new_bce_g;
                        lasso_f = Some(new_lasso_f);
                        lasso_g = Some(new_lasso_g);
                    }
                }

                let zero_totals = || Vector::zeros(rows.len());
                let totals_f = lasso_f.as_ref().map_or_else(zero_totals, |l| l.totals());
                let totals_g = lasso_g.as_ref().map_or_else(zero_totals, |l| l.totals());
                let b_f = swapping_loss(&bce_f.per_sample, &totals_f, cfg.gamma)?;
                let b_g = swapping_loss(&bce_g.per_sample, &totals_g, cfg.gamma)?;
                let decision = select_and_swap(&b_f, &b_g, cfg.retain_fraction)?;
                let scale = 1.0 / decision.r as f64;

                let mut loss_f = mean_over_selected(&bce_f.per_sample, &decision.selected_for_f);
                let mut loss_g = mean_over_selected(&bce_g.per_sample, &decision.selected_for_g);
                check_finite(loss_f, "bce_f", epoch, batch_idx)?;
                check_finite(loss_g, "bce_g", epoch, batch_idx)?;
                let mut upstream_f = bce_upstream(&bce_f, &decision.selected_for_f, scale);
                let mut upstream_g = bce_upstream(&bce_g, &decision.selected_for_g, scale);
                let mut tap_grad_f: Matrix = Array2::zeros(trace_f.tap_features.dim());
                let mut tap_grad_g: Matrix = Array2::zeros(trace_g.tap_features.dim());

                if cfg.lambda1 > 0.0 {
                    let consistency =
                        consistency_loss(&trace_f.logits, &trace_g.logits, &cfg.kernel)?;
                    check_finite(consistency.value, "consistency", epoch, batch_idx)?;
                    loss_f += cfg.lambda1 * consistency.value;
                    loss_g += cfg.lambda1 * consistency.value;
                    upstream_f.scaled_add(cfg.lambda1, &consistency.grad_p);
                    upstream_g.scaled_add(cfg.lambda1, &consistency.grad_q);
                }
                if cfg.lambda2 > 0.0 {
                    let disparity =
                        disparity_loss(&trace_f.tap_features, &trace_g.tap_features, &cfg.kernel)?;
                    check_finite(disparity.value, "disparity", epoch, batch_idx)?;
                    if disparity.value < DISPARITY_CAP {
                        loss_f -= cfg.lambda2 * disparity.value;
                        loss_g -= cfg.lambda2 * disparity.value;
                        tap_grad_f.scaled_add(-cfg.lambda2, &disparity.grad_p);
                        tap_grad_g.scaled_add(-cfg.lambda2, &disparity.grad_q);
                    } else {
                        loss_f -= cfg.lambda2 * DISPARITY_CAP;
                        loss_g -= cfg.lambda2 * DISPARITY_CAP;
                    }
                }

                let grads_f = backward(&params_f, &trace_f, &upstream_f, &tap_grad_f)?;
                let grads_g = backward(params_g_ref, &trace_g, &upstream_g, &tap_grad_g)?;
                let (pf, af) = adam_step(&params_f, &grads_f, &adam_f)?;
                params_f = pf;
                adam_f = af;
                let (pg, ag) = adam_step(
                    params_g_ref,
                    &grads_g,
                    adam_g.as_ref().expect("collaborative mode has g state"),
                )?;
                params_g = Some(pg);
                adam_g = Some(ag);

                for &i in decision.excluded_for_f.iter().chain(&decision.excluded_for_g) {
                    epoch_excluded.push(rows[i]);
                }
                loss_sum_f += loss_f;
                loss_sum_g += loss_g;
                batch_stats.push(BatchStat {
                    epoch,
                    batch: batch_idx,
                    batch_len: rows.len(),
                    selected: decision.r,
                    candidates: candidates_len,
                    flips: flips_here,
                });
            } else {
                let all: Vec<usize> = (0..rows.len()).collect();
                let loss = mean_over_selected(&bce_f.per_sample, &all);
                check_finite(loss, "bce_f", epoch, batch_idx)?;
                let upstream = bce_upstream(&bce_f, &all, 1.0 / rows.len() as f64);
                let tap_grad: Matrix = Array2::zeros(trace_f.tap_features.dim());
                let grads = backward(&params_f, &trace_f, &upstream, &tap_grad)?;
                let (pf, af) = adam_step(&params_f, &grads, &adam_f)?;
                params_f = pf;
                adam_f = af;
                loss_sum_f += loss;
                batch_stats.push(BatchStat {
                    epoch,
                    batch: batch_idx,
                    batch_len: rows.len(),
                    selected: rows.len(),
                    candidates: 0,
                    flips: 0,
                });
            }
            batches += 1;
        }

        let excluded_noisy_fraction = noisy_sample.as_ref().and_then(|noisy| {
            if epoch_excluded.is_empty() {
                None
            } else {
                let hits = epoch_excluded.iter().filter(|&&r| noisy[r]).count();
                Some(hits as f64 / epoch_excluded.len() as f64)
            }
        });

        let (val_precision, val_recall, val_f1) = match val_ds {
            None => (None, None, None),
            Some(val) => {
                let probs = predict_probs(&params_f, params_g.as_ref(), &val.x)?;
                let preds = threshold_probabilities(&probs, PREDICTION_THRESHOLD);
                let metrics = micro_metrics(&preds, &val.y)?;
                (
                    Some(metrics.precision),
                    Some(metrics.recall),
                    Some(metrics.f1),
                )
            }
        };

        epoch_records.push(EpochRecord {
            epoch,
            train_loss_f: loss_sum_f / batches as f64,
            train_loss_g: collaborative.then_some(loss_sum_g / batches as f64),
            val_precision,
            val_recall,
            val_f1,
            flips: epoch_flips,
            excluded_noisy_fraction,
        });
        excluded_per_epoch.push(epoch_excluded);
    }

    Ok(RunState {
        mode: cfg.mode,
        params_f,
        params_g,
        adam_f,
        adam_g,
        training_labels,
        flip_log,
        epoch_records,
        batch_stats,
        excluded_per_epoch,
    })
}

fn push_opt(line: &mut String, value: Option<f64>) {
    line.push(',');
    if let Some(v) = value {
        line.push_str(&v.to_string());
    }
}

/// Per-epoch metrics in CSV form:
/// `epoch,mode,train_loss_f,train_loss_g,val_precision,val_recall,val_f1,flips,excluded_noisy_fraction`.
pub fn metrics_csv_string(run: &RunState) -> String {
    let mut out = String::from(
        "epoch,mode,train_loss_f,train_loss_g,val_precision,val_recall,val_f1,flips,excluded_noisy_fraction\n",
    );
    for record in &run.epoch_records {
        let mut line = format!("{},{},{}", record.epoch, run.mode, record.train_loss_f);
        push_opt(&mut line, record.train_loss_g);
        push_opt(&mut line, record.val_precision);
        push_opt(&mut line, record.val_recall);
        push_opt(&mut line, record.val_f1);
        line.push_str(&format!(",{}", record.flips));
        push_opt(&mut line, record.excluded_noisy_fraction);
        line.push('\n');
        out.push_str(&line);
    }
    out
}

pub fn write_metrics_csv(run: &RunState, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(metrics_csv_string(run).as_bytes())?;
    out.flush()?;
    Ok(())
}

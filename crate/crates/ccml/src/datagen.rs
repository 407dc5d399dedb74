//! Synthetic multi-label datasets, label-noise injection, and the on-disk
//! dataset format (a CSV of features/labels plus a JSON manifest).
//!
//! Generation draws Gaussian features, assigns each class a direction in
//! feature space, and thresholds the per-class scores so that class
//! frequencies decay geometrically (rare classes exist on purpose). Samples
//! near a decision boundary are pushed away from it by `margin`, and every
//! sample keeps at least one label. Noise injection flips label cells of
//! randomly chosen samples, recording every flip in a mask so that detection
//! and correction can be scored later.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{LabelMatrix, Matrix};

/// Largest class frequency; later classes decay geometrically from it.
const FREQ_MAX: f64 = 0.55;
const FREQ_DECAY: f64 = 0.78;
const FREQ_MIN: f64 = 0.02;

/// A multi-label dataset, optionally with hidden clean labels and the mask
/// of injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<u64>,
    /// `M x d` feature matrix.
    pub x: Matrix,
    /// `M x V` (possibly noisy) training labels.
    pub y: LabelMatrix,
    /// Clean labels, kept for evaluation only.
    pub y_clean: Option<LabelMatrix>,
    /// `noise_mask[(i, j)] == 1` exactly where `y` differs from `y_clean`.
    pub noise_mask: Option<LabelMatrix>,
    pub class_names: Vec<String>,
    /// Generation seed, if the dataset came from [`generate`].
    pub seed: Option<u64>,
    /// Injected noise rate, if [`inject_noise`] was applied.
    pub noise_rate_percent: Option<u8>,
}

/// Parameters for [`generate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Seed of the sample draw.
    pub seed: u64,
    /// Seed of the labeling task (class directions and thresholds). Two
    /// datasets sharing a task seed but differing in `seed` are independent
    /// draws labeled by the same function — a leakage-free train/validation
    /// pair. Defaults to `seed`.
    #[serde(default)]
    pub task_seed: Option<u64>,
    /// Minimum distance from each per-class decision boundary; larger values
    /// make the clean problem easier.
    pub margin: f64,
    /// Correlation of class scores through a shared latent direction, in
    /// `[0, 1]`; nonzero values make labels co-occur.
    pub label_correlation: f64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.n_samples < 10 {
            return Err(Error::validation(format!(
                "n_samples must be at least 10, got {}",
                self.n_samples
            )));
        }
        if self.n_features == 0 {
            return Err(Error::validation("n_features must be at least 1"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::validation(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(0.0..=1.0).contains(&self.label_correlation) {
            return Err(Error::validation(format!(
                "label_correlation must lie in [0, 1], got {}",
                self.label_correlation
            )));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.y.ncols()
    }

    /// Check the structural invariants: consistent shapes, binary entries,
    /// the noise mask marking exactly the cells where `y` and `y_clean`
    /// differ, and at least one label per clean row.
    pub fn validate(&self) -> Result<()> {
        let (m, v) = self.y.dim();
        if self.x.nrows() != m {
            return Err(Error::validation(format!(
                "feature rows {} do not match label rows {m}",
                self.x.nrows()
            )));
        }
        if self.ids.len() != m {
            return Err(Error::validation(format!(
                "{} ids for {m} samples",
                self.ids.len()
            )));
        }
        if self.class_names.len() != v {
            return Err(Error::validation(format!(
                "{} class names for {v} classes",
                self.class_names.len()
            )));
        }
        crate::bce::check_binary(&self.y)?;
        for (name, labels) in [("y_clean", &self.y_clean), ("noise_mask", &self.noise_mask)] {
            if let Some(mat) = labels {
                if mat.dim() != (m, v) {
                    return Err(Error::validation(format!(
                        "{name} shape {:?} does not match labels {:?}",
                        mat.dim(),
                        (m, v)
                    )));
                }
                crate::bce::check_binary(mat)?;
            }
        }
        if let Some(clean) = &self.y_clean {
            for i in 0..m {
                if (0..v).all(|j| clean[(i, j)] == 0) {
                    return Err(Error::validation(format!(
                        "clean labels of sample {i} are all zero"
                    )));
                }
            }
            if let Some(mask) = &self.noise_mask {
                for i in 0..m {
                    for j in 0..v {
                        let differs = self.y[(i, j)] != clean[(i, j)];
                        if differs != (mask[(i, j)] == 1) {
                            return Err(Error::validation(format!(
                                "noise mask at ({i}, {j}) does not match the label difference"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Size of the task-stream reference draw the thresholds are estimated on.
const THRESHOLD_REF_SAMPLES: usize = 4096;

/// Generate a clean synthetic dataset; deterministic for a given spec.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let (m, d, v) = (spec.n_samples, spec.n_features, spec.n_classes);
    // The labeling task (directions and thresholds) comes from its own
    // stream so that datasets with a shared task seed are labeled by the
    // same function regardless of their sample counts and seeds.
    let task_seed = spec.task_seed.unwrap_or(spec.seed);
    let mut task_rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0xA076_1D64_78BD_642F);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One shared latent direction plus one direction per class,
    // orthonormalized when the feature space has room for it.
    let mut directions: Vec<Array1<f64>> = (0..=v)
        .map(|_| Array1::from_shape_fn(d, |_| task_rng.sample::<f64, _>(StandardNormal)))
        .collect();
    if v < d {
        orthonormalize(&mut directions);
    } else {
        for dir in &mut directions {
            let norm = dir.dot(dir).sqrt().max(1e-12);
            *dir /= norm;
        }
    }
    let rho = spec.label_correlation;
    let mix = (1.0 - rho * rho).sqrt();
    let class_dirs: Vec<Array1<f64>> = (0..v)
        .map(|j| {
            let mut u = &directions[j + 1] * mix + &directions[0] * rho;
            if v + 1 > d {
                let norm = u.dot(&u).sqrt().max(1e-12);
                u /= norm;
            }
            u
        })
        .collect();

    // Per-class thresholds from the empirical quantile of a fixed reference
    // draw, matching a geometrically decaying target frequency.
    let n_ref = THRESHOLD_REF_SAMPLES;
    let x_ref = Array2::from_shape_fn((n_ref, d), |_| task_rng.sample::<f64, _>(StandardNormal));
    let freq_floor = FREQ_MIN.max(2.0 / m as f64);
    let mut thresholds = vec![0.0; v];
    for (j, u) in class_dirs.iter().enumerate() {
        let target = (FREQ_MAX * FREQ_DECAY.powi(j as i32)).max(freq_floor);
        let mut column: Vec<f64> = (0..n_ref).map(|i| x_ref.row(i).dot(u)).collect();
        column.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
        let k = ((target * n_ref as f64).round() as usize).clamp(1, n_ref - 1);
        thresholds[j] = 0.5 * (column[k - 1] + column[k]);
    }

    let mut x = Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal));
    let scores = |x: &Matrix| -> Matrix {
        let mut s = Array2::zeros((m, v));
        for (j, u) in class_dirs.iter().enumerate() {
            for i in 0..m {
                s[(i, j)] = x.row(i).dot(u);
            }
        }
        s
    };

    // Push samples out of the margin band around each boundary, then
    // re-derive scores and labels so they stay consistent with the features.
    for i in 0..m {
        for (j, u) in class_dirs.iter().enumerate() {
            let gap = x.row(i).dot(u) - thresholds[j];
            if gap.abs() < spec.margin {
                let target = if gap > 0.0 { spec.margin } else { -spec.margin };
                let delta = target - gap;
                let mut row = x.row_mut(i);
                row += &(u * delta);
            }
        }
    }
    let s = scores(&x);
    let mut y: LabelMatrix = Array2::zeros((m, v));
    for i in 0..m {
        for j in 0..v {
            y[(i, j)] = u8::from(s[(i, j)] > thresholds[j]);
        }
    }

    // Every sample keeps at least one label: lift its best class over the
    // threshold, feature-consistently.
    for i in 0..m {
        if (0..v).any(|j| y[(i, j)] == 1) {
            continue;
        }
        let best = (0..v)
            .max_by(|&a, &b| {
                (s[(i, a)] - thresholds[a])
                    .partial_cmp(&(s[(i, b)] - thresholds[b]))
                    .expect("scores are finite")
            })
            .expect("at least one class");
        let delta = thresholds[best] + spec.margin - s[(i, best)];
        let mut row = x.row_mut(i);
        row += &(&class_dirs[best] * delta);
        for j in 0..v {
            y[(i, j)] = u8::from(x.row(i).dot(&class_dirs[j]) > thresholds[j]);
        }
        y[(i, best)] = 1;
    }

    let ds = Dataset {
        ids: (0..m as u64).collect(),
        x,
        y_clean: Some(y.clone()),
        y,
        noise_mask: None,
        class_names: (0..v).map(|j| format!("class_{j}")).collect(),
        seed: Some(spec.seed),
        noise_rate_percent: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn orthonormalize(vectors: &mut [Array1<f64>]) {
    let d = vectors[0].len();
    for k in 0..vectors.len() {
        for prev in 0..k {
            let proj = vectors[k].dot(&vectors[prev]);
            let scaled = &vectors[prev] * proj;
            vectors[k] -= &scaled;
        }
        let mut norm = vectors[k].dot(&vectors[k]).sqrt();
        if norm < 1e-8 {
            // Degenerate draw; fall back to a canonical basis vector.
            let mut basis = Array1::zeros(d);
            basis[k % d] = 1.0;
            vectors[k] = basis;
            for prev in 0..k {
                let proj = vectors[k].dot(&vectors[prev]);
                let scaled = &vectors[prev] * proj;
                vectors[k] -= &scaled;
            }
            norm = vectors[k].dot(&vectors[k]).sqrt().max(1e-12);
        }
        vectors[k] /= norm;
    }
}

/// Number of samples and of label positions per sample that
/// [`inject_noise`] alters for a given rate.
pub fn noise_counts(rate_percent: u8, n_samples: usize, n_classes: usize) -> (usize, usize) {
    if rate_percent == 0 {
        return (0, 0);
    }
    let rate = rate_percent as usize;
    let samples = (rate * n_samples / 100).max(1);
    let positions = (rate * n_classes / 100).max(1);
    (samples, positions)
}

/// Flip labels of randomly chosen samples, starting from the clean labels.
///
/// Selects `max(1, floor(rate * M / 100))` samples without replacement and
/// toggles `max(1, floor(rate * V / 100))` label positions in each, so both
/// missing-label and wrong-label noise arise. Deterministic for a given seed.
pub fn inject_noise(ds: &Dataset, rate_percent: u8, seed: u64) -> Result<Dataset> {
    if rate_percent > 100 {
        return Err(Error::validation(format!(
            "noise rate must lie in [0, 100], got {rate_percent}"
        )));
    }
    let clean = ds
        .y_clean
        .as_ref()
        .ok_or_else(|| Error::state("noise injection requires clean labels"))?;

    let (m, v) = clean.dim();
    let mut y = clean.clone();
    let mut mask: LabelMatrix = Array2::zeros((m, v));
    if rate_percent > 0 {
        let (k_samples, k_positions) = noise_counts(rate_percent, m, v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = rand::seq::index::sample(&mut rng, m, k_samples).into_vec();
        rows.sort_unstable();
        for row in rows {
            let mut cols = rand::seq::index::sample(&mut rng, v, k_positions).into_vec();
            cols.sort_unstable();
            for col in cols {
                y[(row, col)] ^= 1;
                mask[(row, col)] = 1;
            }
        }
    }

    let noisy = Dataset {
        ids: ds.ids.clone(),
        x: ds.x.clone(),
        y,
        y_clean: Some(clean.clone()),
        noise_mask: Some(mask),
        class_names: ds.class_names.clone(),
        seed: ds.seed,
        noise_rate_percent: Some(rate_percent),
    };
    noisy.validate()?;
    Ok(noisy)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    class_names: Vec<String>,
    seed: Option<u64>,
    noise_rate_percent: Option<u8>,
}

/// The two file paths a dataset prefix maps to.
pub fn dataset_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut csv = prefix.as_os_str().to_owned();
    csv.push(".csv");
    let mut manifest = prefix.as_os_str().to_owned();
    manifest.push(".manifest.json");
    (PathBuf::from(csv), PathBuf::from(manifest))
}

/// Write `<prefix>.csv` and `<prefix>.manifest.json`.
///
/// Floats are written in shortest round-trip form, so `load(save(ds))`
/// reproduces the dataset bit-exactly.
pub fn save(ds: &Dataset, prefix: &Path) -> Result<()> {
    ds.validate()?;
    let (csv_path, manifest_path) = dataset_paths(prefix);
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }

    let manifest = Manifest {
        n_samples: ds.n_samples(),
        n_features: ds.n_features(),
        n_classes: ds.n_classes(),
        class_names: ds.class_names.clone(),
        seed: ds.seed,
        noise_rate_percent: ds.noise_rate_percent,
    };
    let mut mf = BufWriter::new(File::create(&manifest_path)?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;

    let mut out = BufWriter::new(File::create(&csv_path)?);
    let (d, v) = (ds.n_features(), ds.n_classes());
    let mut header = String::from("id");
    for j in 0..d {
        header.push_str(&format!(",x_{j}"));
    }
    for j in 0..v {
        header.push_str(&format!(",y_{j}"));
    }
    if ds.y_clean.is_some() {
        for j in 0..v {
            header.push_str(&format!(",yc_{j}"));
        }
    }
    if ds.noise_mask.is_some() {
        for j in 0..v {
            header.push_str(&format!(",nm_{j}"));
        }
    }
    writeln!(out, "{header}")?;
    for i in 0..ds.n_samples() {
        write!(out, "{}", ds.ids[i])?;
        for j in 0..d {
            write!(out, ",{}", ds.x[(i, j)])?;
        }
        for j in 0..v {
            write!(out, ",{}", ds.y[(i, j)])?;
        }
        if let Some(clean) = &ds.y_clean {
            for j in 0..v {
                write!(out, ",{}", clean[(i, j)])?;
            }
        }
        if let Some(mask) = &ds.noise_mask {
            for j in 0..v {
                write!(out, ",{}", mask[(i, j)])?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Load a dataset written by [`save`].
pub fn load(prefix: &Path) -> Result<Dataset> {
    let (csv_path, manifest_path) = dataset_paths(prefix);
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(File::open(&manifest_path)?)).map_err(|e| {
            Error::Parse {
                path: manifest_path.clone(),
                line: 0,
                message: format!("invalid manifest: {e}"),
            }
        })?;
    if manifest.class_names.len() != manifest.n_classes {
        return Err(Error::validation(format!(
            "manifest lists {} class names for {} classes",
            manifest.class_names.len(),
            manifest.n_classes
        )));
    }

    let parse_err = |line: usize, message: String| Error::Parse {
        path: csv_path.clone(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(&csv_path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => return Err(parse_err(0, "file is empty".into())),
        Some(h) => h?,
    };
    if header.trim().is_empty() {
        return Err(parse_err(1, "file is empty".into()));
    }

    let (d, v) = (manifest.n_features, manifest.n_classes);
    let columns: Vec<&str> = header.split(',').collect();
    let mut expected = vec!["id".to_string()];
    expected.extend((0..d).map(|j| format!("x_{j}")));
    expected.extend((0..v).map(|j| format!("y_{j}")));
    let has_clean = columns.get(expected.len()).copied() == Some("yc_0");
    if has_clean {
        expected.extend((0..v).map(|j| format!("yc_{j}")));
    }
    let has_mask = columns.get(expected.len()).copied() == Some("nm_0");
    if has_mask {
        expected.extend((0..v).map(|j| format!("nm_{j}")));
    }
    if columns.len() != expected.len() {
        return Err(Error::validation(format!(
            "header has {} columns but the manifest implies {}",
            columns.len(),
            expected.len()
        )));
    }
    for (got, want) in columns.iter().zip(&expected) {
        if got != want {
            return Err(Error::validation(format!(
                "unexpected column `{got}` where `{want}` was expected"
            )));
        }
    }
    if has_mask && !has_clean {
        return Err(Error::validation(
            "noise mask columns require clean label columns",
        ));
    }

    let m = manifest.n_samples;
    let mut ids = Vec::with_capacity(m);
    let mut x = Array2::zeros((m, d));
    let mut y: LabelMatrix = Array2::zeros((m, v));
    let mut y_clean: Option<LabelMatrix> = has_clean.then(|| Array2::zeros((m, v)));
    let mut noise_mask: Option<LabelMatrix> = has_mask.then(|| Array2::zeros((m, v)));

    let mut row = 0usize;
    for (line_idx, line) in lines.enumerate() {
        let line_no = line_idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if row >= m {
            return Err(Error::validation(format!(
                "file has more than the {m} rows announced by the manifest"
            )));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(parse_err(
                line_no,
                format!("{} fields, expected {}", fields.len(), expected.len()),
            ));
        }
        let mut idx = 0;
        let mut take = |name: &str| -> (&str, String) {
            let value = fields[idx];
            idx += 1;
            (value, name.to_string())
        };
        let (raw, _) = take("id");
        ids.push(raw.parse::<u64>().map_err(|e| {
            parse_err(line_no, format!("field `id`: {e}"))
        })?);
        for j in 0..d {
            let (raw, name) = take(&format!("x_{j}"));
            x[(row, j)] = raw
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, format!("field `{name}`: {e}")))?;
        }
        let parse_bit = |raw: &str, name: &str| -> Result<u8> {
            match raw {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(parse_err(
                    line_no,
                    format!("field `{name}`: expected 0 or 1, got `{other}`"),
                )),
            }
        };
        for j in 0..v {
            let (raw, name) = take(&format!("y_{j}"));
            y[(row, j)] = parse_bit(raw, &name)?;
        }
        if let Some(clean) = y_clean.as_mut() {
            for j in 0..v {
                let (raw, name) = take(&format!("yc_{j}"));
                clean[(row, j)] = parse_bit(raw, &name)?;
            }
        }
        if let Some(mask) = noise_mask.as_mut() {
            for j in 0..v {
                let (raw, name) = take(&format!("nm_{j}"));
                mask[(row, j)] = parse_bit(raw, &name)?;
            }
        }
        row += 1;
    }
    if row != m {
        return Err(Error::validation(format!(
            "file has {row} data rows but the manifest announces {m}"
        )));
    }

    let ds = Dataset {
        ids,
        x,
        y,
        y_clean,
        noise_mask,
        class_names: manifest.class_names,
        seed: manifest.seed,
        noise_rate_percent: manifest.noise_rate_percent,
    };
    ds.validate()?;
    Ok(ds)
}

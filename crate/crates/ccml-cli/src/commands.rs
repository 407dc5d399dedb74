//! The generate / corrupt / train / eval subcommands plus the run-metadata
//! helpers they share.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ccml::datagen::{self, dataset_paths, generate, inject_noise, GenSpec};
use ccml::discrepancy::KernelSpec;
use ccml::error::{Error, Result};
use ccml::eval::{
    micro_metrics, noise_detection_metrics, per_class_metrics, threshold_probabilities,
    write_metrics_json, write_predictions, MetricsReport, MicroMetrics,
};
use ccml::flipping::append_flip_log;
use ccml::model::{load_checkpoint, save_checkpoint};
use ccml::trainer::{
    predict_probs, train, write_metrics_csv, Mode, Seeds, TrainConfig, PREDICTION_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Ccml,
}

impl From<ModeArg> for Mode {
    fn from(mode: ModeArg) -> Mode {
        match mode {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Ccml => Mode::Ccml,
        }
    }
}

// ---------------------------------------------------------------------------
// run.json
// ---------------------------------------------------------------------------

/// Self-describing record written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMeta<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    /// SHA-256 content hashes of every input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_dataset_files(prefix: &Path, into: &mut BTreeMap<String, String>) -> Result<()> {
    let (csv, manifest) = dataset_paths(prefix);
    for path in [csv, manifest] {
        into.insert(path.display().to_string(), sha256_hex(&path)?);
    }
    Ok(())
}

pub fn write_run_meta<C: Serialize>(meta: &RunMeta<C>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Dataset prefixes may point at a directory; a default file stem is used
/// there so `--out data/` stays valid.
fn resolve_prefix(raw: &Path) -> PathBuf {
    let trailing_slash = raw
        .as_os_str()
        .to_string_lossy()
        .ends_with(std::path::MAIN_SEPARATOR);
    if trailing_slash || raw.is_dir() {
        raw.join("dataset")
    } else {
        raw.to_path_buf()
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of samples.
    #[arg(long)]
    pub samples: usize,
    /// Number of real-valued features.
    #[arg(long)]
    pub features: usize,
    /// Number of classes.
    #[arg(long)]
    pub classes: usize,
    /// Sample-draw seed.
    #[arg(long)]
    pub seed: u64,
    /// Labeling-task seed; share it between two generate calls to get a
    /// leakage-free train/validation pair. Defaults to --seed.
    #[arg(long)]
    pub task_seed: Option<u64>,
    /// Decision-margin width of the synthetic classes.
    #[arg(long, default_value_t = 0.8)]
    pub margin: f64,
    /// Label co-occurrence strength in [0, 1].
    #[arg(long, default_value_t = 0.25)]
    pub label_correlation: f64,
    /// Output dataset prefix (writes <out>.csv and <out>.manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let spec = GenSpec {
        n_samples: args.samples,
        n_features: args.features,
        n_classes: args.classes,
        seed: args.seed,
        task_seed: args.task_seed,
        margin: args.margin,
        label_correlation: args.label_correlation,
    };
    let dataset = generate(&spec)?;
    let prefix = resolve_prefix(&args.out);
    datagen::save(&dataset, &prefix)?;
    let meta = RunMeta {
        command: "generate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: spec,
        input_hashes: BTreeMap::new(),
    };
    write_run_meta(&meta, &run_meta_path(&prefix))?;
    let (csv, manifest) = dataset_paths(&prefix);
    println!(
        "wrote {} and {} ({} samples, {} features, {} classes)",
        csv.display(),
        manifest.display(),
        dataset.n_samples(),
        dataset.n_features(),
        dataset.n_classes()
    );
    Ok(())
}

fn run_meta_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

// ---------------------------------------------------------------------------
// corrupt
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Input dataset prefix (needs clean labels).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Noise rate in percent, 0..=100.
    #[arg(long)]
    pub noise: u8,
    /// Noise-injection seed.
    #[arg(long)]
    pub seed: u64,
    /// Output prefix; defaults to rewriting the input in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorruptConfig {
    noise_rate_percent: u8,
    seed: u64,
}

pub fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let input = resolve_prefix(&args.input);
    let dataset = datagen::load(&input)?;
    let mut input_hashes = BTreeMap::new();
    hash_dataset_files(&input, &mut input_hashes)?;
    let noisy = inject_noise(&dataset, args.noise, args.seed)?;
    let out = args.out.map(|p| resolve_prefix(&p)).unwrap_or(input);
    datagen::save(&noisy, &out)?;
    let meta = RunMeta {
        command: "corrupt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: CorruptConfig {
            noise_rate_percent: args.noise,
            seed: args.seed,
        },
        input_hashes,
    };
    write_run_meta(&meta, &run_meta_path(&out))?;
    let flipped: usize = noisy
        .noise_mask
        .as_ref()
        .map(|m| m.iter().map(|&b| b as usize).sum())
        .unwrap_or(0);
    println!(
        "wrote {}.csv with {} flipped label cells ({}%)",
        out.display(),
        flipped,
        args.noise
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training mode; overrides the config file when given.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Training dataset prefix.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset prefix (clean labels) for per-epoch metrics.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// JSON config file with training-config fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// Individual training-config flags; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub retain_fraction: Option<f64>,
    #[arg(long)]
    pub flip_rate: Option<f64>,
    #[arg(long)]
    pub flip_start_fraction: Option<f64>,
    /// Comma-separated hidden-layer widths, e.g. `64,32`.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub tap_index: Option<usize>,
    /// `median` or a fixed bandwidth value.
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub seed_data: Option<u64>,
    #[arg(long)]
    pub seed_f: Option<u64>,
    #[arg(long)]
    pub seed_g: Option<u64>,
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| {
                Error::validation(format!("invalid config {}: {e}", path.display()))
            })
        }
    }
}

pub fn apply_overrides(cfg: &mut TrainConfig, ov: &ConfigOverrides) -> Result<()> {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(value) = ov.$field { cfg.$field = value; })*
        };
    }
    set!(
        epochs,
        batch_size,
        learning_rate,
        lambda1,
        lambda2,
        alpha,
        beta,
        gamma,
        retain_fraction,
        flip_rate,
        flip_start_fraction
    );
    if ov.tap_index.is_some() {
        cfg.tap_index = ov.tap_index;
    }
    if let Some(hidden) = &ov.hidden {
        cfg.hidden_layers = hidden
            .split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::validation(format!("invalid hidden width `{w}`: {e}")))
            })
            .collect::<Result<Vec<usize>>>()?;
    }
    if let Some(bandwidth) = &ov.bandwidth {
        cfg.kernel = if bandwidth == "median" {
            KernelSpec::MedianHeuristic
        } else {
            let sigma = bandwidth.parse::<f64>().map_err(|e| {
                Error::validation(format!("invalid bandwidth `{bandwidth}`: {e}"))
            })?;
            KernelSpec::Fixed { sigma }
        };
    }
    let Seeds {
        mut data,
        mut net_f,
        mut net_g,
    } = cfg.seeds;
    if let Some(s) = ov.seed_data {
        data = s;
    }
    if let Some(s) = ov.seed_f {
        net_f = s;
    }
    if let Some(s) = ov.seed_g {
        net_g = s;
    }
    cfg.seeds = Seeds { data, net_f, net_g };
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub train_data: String,
    pub val_data: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Train on already-saved datasets and write the run directory:
/// `run.json`, `metrics.csv`, `f.ckpt` (and `g.ckpt`), `flips.jsonl`, and
/// `detection.json` when the training data carries a noise mask.
pub fn train_into_dir(
    train_prefix: &Path,
    val_prefix: Option<&Path>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<()> {
    let train_ds = datagen::load(train_prefix)?;
    let val_ds = val_prefix.map(datagen::load).transpose()?;
    std::fs::create_dir_all(out_dir)?;

    let run = train(&train_ds, val_ds.as_ref(), cfg)?;

    write_metrics_csv(&run, &out_dir.join("metrics.csv"))?;
    save_checkpoint(&run.params_f, run.adam_f.step, &out_dir.join("f.ckpt"))?;
    if let (Some(params_g), Some(adam_g)) = (&run.params_g, &run.adam_g) {
        save_checkpoint(params_g, adam_g.step, &out_dir.join("g.ckpt"))?;
    }
    if cfg.mode == Mode::Ccml {
        let flip_path = out_dir.join("flips.jsonl");
        std::fs::write(&flip_path, "")?;
        append_flip_log(&run.flip_log, &flip_path)?;
    }
    if train_ds.noise_mask.is_some() {
        let detection = noise_detection_metrics(&run.excluded_per_epoch, &run.flip_log, &train_ds)?;
        let text = serde_json::to_string_pretty(&detection)?;
        std::fs::write(out_dir.join("detection.json"), text + "\n")?;
    }

    let mut input_hashes = BTreeMap::new();
    hash_dataset_files(train_prefix, &mut input_hashes)?;
    if let Some(val_prefix) = val_prefix {
        hash_dataset_files(val_prefix, &mut input_hashes)?;
    }
    let meta = RunMeta {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: TrainRunConfig {
            train_data: train_prefix.display().to_string(),
            val_data: val_prefix.map(|p| p.display().to_string()),
            train: cfg.clone(),
        },
        input_hashes,
    };
    write_run_meta(&meta, &out_dir.join("run.json"))?;
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    let train_prefix = resolve_prefix(&args.train);
    let val_prefix = args.val.as_deref().map(resolve_prefix);
    train_into_dir(&train_prefix, val_prefix.as_deref(), &cfg, &args.out)?;
    println!(
        "trained {} model into {} ({} epochs)",
        cfg.mode,
        args.out.display(),
        cfg.epochs
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset prefix to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalRunConfig {
    run_dir: String,
    data: String,
    threshold: f64,
}

/// Load a finished run's checkpoints, score a dataset, and write
/// `predictions.csv` plus `metrics.json` into `out_dir`. Returns the
/// micro-averaged metrics.
pub fn eval_into_dir(run_dir: &Path, data_prefix: &Path, out_dir: &Path) -> Result<MicroMetrics> {
    let meta_text = std::fs::read_to_string(run_dir.join("run.json"))?;
    let meta: RunMeta<TrainRunConfig> = serde_json::from_str(&meta_text).map_err(|e| {
        Error::validation(format!("invalid run.json in {}: {e}", run_dir.display()))
    })?;
    let dataset = datagen::load(data_prefix)?;

    let (params_f, _) = load_checkpoint(&run_dir.join("f.ckpt"))?;
    let params_g = match meta.config.train.mode {
        Mode::Baseline => None,
        Mode::Ccml => Some(load_checkpoint(&run_dir.join("g.ckpt"))?.0),
    };
    let probs = predict_probs(&params_f, params_g.as_ref(), &dataset.x)?;
    let predictions = threshold_probabilities(&probs, PREDICTION_THRESHOLD);

    std::fs::create_dir_all(out_dir)?;
    write_predictions(
        &dataset.ids,
        &probs,
        &predictions,
        &out_dir.join("predictions.csv"),
    )?;
    let micro = micro_metrics(&predictions, &dataset.y)?;
    let report = MetricsReport {
        micro,
        per_class: per_class_metrics(&predictions, &dataset.y)?,
        noise_detection: None,
    };
    write_metrics_json(&report, &out_dir.join("metrics.json"))?;

    let mut input_hashes = BTreeMap::new();
    hash_dataset_files(data_prefix, &mut input_hashes)?;
    for name in ["f.ckpt", "g.ckpt"] {
        let path = run_dir.join(name);
        if path.exists() {
            input_hashes.insert(path.display().to_string(), sha256_hex(&path)?);
        }
    }
    let eval_meta = RunMeta {
        command: "eval".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: EvalRunConfig {
            run_dir: run_dir.display().to_string(),
            data: data_prefix.display().to_string(),
            threshold: PREDICTION_THRESHOLD,
        },
        input_hashes,
    };
    write_run_meta(&eval_meta, &out_dir.join("run.json"))?;
    Ok(micro)
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out_dir = args.out.unwrap_or_else(|| args.run.join("eval"));
    let data_prefix = resolve_prefix(&args.data);
    let micro = eval_into_dir(&args.run, &data_prefix, &out_dir)?;
    println!(
        "precision {:.4}  recall {:.4}  f1 {:.4}  ({})",
        micro.precision,
        micro.recall,
        micro.f1,
        out_dir.display()
    );
    Ok(())
}

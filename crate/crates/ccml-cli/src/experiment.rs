//! The experiment subcommand: for every (noise rate, seed) train both modes
//! on the same corrupted data, evaluate on a shared clean validation split,
//! and aggregate a comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use ccml::datagen::{generate, inject_noise, save, GenSpec};
use ccml::error::{Error, Result};
use ccml::eval::MicroMetrics;
use ccml::trainer::{Mode, Seeds, TrainConfig};

use crate::commands::{apply_overrides, eval_into_dir, load_config, ConfigOverrides};

// Seed layout of one experiment cell, derived from the cell's base seed.
const VAL_SAMPLE_OFFSET: u64 = 7919;
const NOISE_SEED_OFFSET: u64 = 104_729;
const DATA_ORDER_OFFSET: u64 = 11;
const NET_F_OFFSET: u64 = 101;
const NET_G_OFFSET: u64 = 202;

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Comma-separated noise rates in percent.
    #[arg(long, default_value = "20,30,40,50")]
    pub rates: String,
    /// Comma-separated base seeds; one full comparison runs per seed.
    #[arg(long, default_value = "1,2,3,4,5")]
    pub seeds: String,
    /// Training-split size.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Clean validation-split size.
    #[arg(long, default_value_t = 500)]
    pub val_samples: usize,
    #[arg(long, default_value_t = 16)]
    pub features: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.8)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.25)]
    pub label_correlation: f64,
    /// JSON config file with training-config fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Serialize)]
struct Plan {
    rates: Vec<u8>,
    seeds: Vec<u64>,
    samples: usize,
    val_samples: usize,
    features: usize,
    classes: usize,
    margin: f64,
    label_correlation: f64,
    train: TrainConfig,
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|e| Error::validation(format!("invalid {what} `{part}`: {e}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::validation(format!("{what} list is empty")));
    }
    Ok(out)
}

fn cell_config(base: &TrainConfig, mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seeds: Seeds {
            data: seed + DATA_ORDER_OFFSET,
            net_f: seed + NET_F_OFFSET,
            net_g: seed + NET_G_OFFSET,
        },
        ..base.clone()
    }
}

fn cell_dir(out: &Path, rate: u8, seed: u64, mode: Mode) -> PathBuf {
    out.join("cells").join(format!("rate{rate}_seed{seed}_{mode}"))
}

type CellKey = (u8, u64, Mode);
type CellOutcome = (CellKey, std::result::Result<MicroMetrics, String>);

#[derive(Debug, Clone, Copy)]
struct Aggregate {
    mean: f64,
    std: f64,
}

fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    };
    Some(Aggregate { mean, std })
}

pub fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let rates: Vec<u8> = parse_list(&args.rates, "noise rate")?;
    if let Some(bad) = rates.iter().find(|&&r| r > 100) {
        return Err(Error::validation(format!(
            "noise rate {bad} outside [0, 100]"
        )));
    }
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;

    let mut base_cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut base_cfg, &args.overrides)?;
    base_cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let plan = Plan {
        rates: rates.clone(),
        seeds: seeds.clone(),
        samples: args.samples,
        val_samples: args.val_samples,
        features: args.features,
        classes: args.classes,
        margin: args.margin,
        label_correlation: args.label_correlation,
        train: base_cfg.clone(),
    };
    std::fs::write(
        args.out.join("plan.json"),
        serde_json::to_string_pretty(&plan)? + "\n",
    )?;

    // Pre-generate every dataset sequentially so parallel cells only read.
    let mut train_paths: BTreeMap<(u8, u64), PathBuf> = BTreeMap::new();
    let mut val_paths: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for &seed in &seeds {
        let data_dir = args.out.join("data").join(format!("seed{seed}"));
        std::fs::create_dir_all(&data_dir)?;
        let clean = generate(&GenSpec {
            n_samples: args.samples,
            n_features: args.features,
            n_classes: args.classes,
            seed,
            task_seed: Some(seed),
            margin: args.margin,
            label_correlation: args.label_correlation,
        })?;
        let val = generate(&GenSpec {
            n_samples: args.val_samples,
            n_features: args.features,
            n_classes: args.classes,
            seed: seed + VAL_SAMPLE_OFFSET,
            task_seed: Some(seed),
            margin: args.margin,
            label_correlation: args.label_correlation,
        })?;
        let val_prefix = data_dir.join("val");
        save(&val, &val_prefix)?;
        val_paths.insert(seed, val_prefix);
        for &rate in &rates {
            let noisy = inject_noise(&clean, rate, seed + NOISE_SEED_OFFSET)?;
            let train_prefix = data_dir.join(format!("train_rate{rate}"));
            save(&noisy, &train_prefix)?;
            train_paths.insert((rate, seed), train_prefix);
        }
    }

    let mut cells: Vec<(u8, u64, Mode)> = Vec::new();
    for &rate in &rates {
        for &seed in &seeds {
            for mode in [Mode::Baseline, Mode::Ccml] {
                cells.push((rate, seed, mode));
            }
        }
    }

    let threads = std::env::var("CCML_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.min(cells.len()))
        .build()
        .map_err(|e| Error::validation(format!("cannot build thread pool: {e}")))?;

    let outcomes: Vec<CellOutcome> = pool.install(|| {
            cells
                .par_iter()
                .map(|&(rate, seed, mode)| {
                    let dir = cell_dir(&args.out, rate, seed, mode);
                    let train_prefix = &train_paths[&(rate, seed)];
                    let val_prefix = &val_paths[&seed];
                    let cfg = cell_config(&base_cfg, mode, seed);
                    let result = crate::commands::train_into_dir(
                        train_prefix,
                        Some(val_prefix),
                        &cfg,
                        &dir,
                    )
                    .and_then(|()| eval_into_dir(&dir, val_prefix, &dir.join("eval_val")));
                    ((rate, seed, mode), result.map_err(|e| e.to_string()))
                })
                .collect()
        });

    let mut results: BTreeMap<(u8, u64, u8), Option<MicroMetrics>> = BTreeMap::new();
    let mut failures = Vec::new();
    for ((rate, seed, mode), outcome) in outcomes {
        let mode_key = match mode {
            Mode::Baseline => 0u8,
            Mode::Ccml => 1u8,
        };
        match outcome {
            Ok(metrics) => {
                results.insert((rate, seed, mode_key), Some(metrics));
            }
            Err(message) => {
                eprintln!("cell rate={rate} seed={seed} mode={mode} failed: {message}");
                failures.push(format!("rate={rate} seed={seed} mode={mode}: {message}"));
                results.insert((rate, seed, mode_key), None);
            }
        }
    }

    let report_csv = build_report_csv(&rates, &seeds, &results);
    std::fs::write(args.out.join("report.csv"), &report_csv)?;
    let report_txt = build_report_txt(&rates, &seeds, &results, &failures);
    std::fs::write(args.out.join("report.txt"), &report_txt)?;
    print!("{report_txt}");
    println!("report written to {}", args.out.join("report.txt").display());
    Ok(())
}

fn collect(
    results: &BTreeMap<(u8, u64, u8), Option<MicroMetrics>>,
    seeds: &[u64],
    rate: u8,
    mode_key: u8,
    pick: impl Fn(&MicroMetrics) -> f64,
) -> Vec<f64> {
    seeds
        .iter()
        .filter_map(|&s| results.get(&(rate, s, mode_key)).copied().flatten())
        .map(|m| pick(&m))
        .collect()
}

fn build_report_csv(
    rates: &[u8],
    seeds: &[u64],
    results: &BTreeMap<(u8, u64, u8), Option<MicroMetrics>>,
) -> String {
    let mut out = String::from("rate");
    for mode in ["baseline", "ccml"] {
        for metric in ["precision", "recall", "f1"] {
            let _ = write!(out, ",{mode}_{metric}_mean,{mode}_{metric}_std");
        }
    }
    out.push_str(",delta_f1_mean\n");

    for &rate in rates {
        let _ = write!(out, "{rate}");
        let mut f1_means: [Option<f64>; 2] = [None, None];
        for mode_key in [0u8, 1u8] {
            for pick in [
                |m: &MicroMetrics| m.precision,
                |m: &MicroMetrics| m.recall,
                |m: &MicroMetrics| m.f1,
            ] {
                match aggregate(&collect(results, seeds, rate, mode_key, pick)) {
                    Some(agg) => {
                        let _ = write!(out, ",{},{}", agg.mean, agg.std);
                    }
                    None => out.push_str(",,"),
                }
            }
            f1_means[mode_key as usize] =
                aggregate(&collect(results, seeds, rate, mode_key, |m| m.f1)).map(|a| a.mean);
        }
        match (f1_means[0], f1_means[1]) {
            (Some(base), Some(ccml)) => {
                let _ = writeln!(out, ",{}", ccml - base);
            }
            _ => out.push_str(",\n"),
        }
    }
    out
}

fn build_report_txt(
    rates: &[u8],
    seeds: &[u64],
    results: &BTreeMap<(u8, u64, u8), Option<MicroMetrics>>,
    failures: &[String],
) -> String {
    let fmt_cell = |agg: Option<Aggregate>| -> String {
        match agg {
            Some(a) => format!("{:.4} +/- {:.4}", a.mean, a.std),
            None => "n/a".into(),
        }
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "micro-averaged metrics on the clean validation split, mean +/- std over {} seed(s)",
        seeds.len()
    );
    let _ = writeln!(
        out,
        "{:<6} {:<19} {:<19} {:<19} {:<19} {:<19} {:<19} {:>8}",
        "noise",
        "baseline P",
        "baseline R",
        "baseline F1",
        "ccml P",
        "ccml R",
        "ccml F1",
        "dF1"
    );
    for &rate in rates {
        let mut cols = Vec::new();
        let mut f1_means: [Option<f64>; 2] = [None, None];
        for mode_key in [0u8, 1u8] {
            for pick in [
                |m: &MicroMetrics| m.precision,
                |m: &MicroMetrics| m.recall,
                |m: &MicroMetrics| m.f1,
            ] {
                cols.push(fmt_cell(aggregate(&collect(
                    results, seeds, rate, mode_key, pick,
                ))));
            }
            f1_means[mode_key as usize] =
                aggregate(&collect(results, seeds, rate, mode_key, |m| m.f1)).map(|a| a.mean);
        }
        let delta = match (f1_means[0], f1_means[1]) {
            (Some(base), Some(ccml)) => format!("{:+.4}", ccml - base),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "{:<6} {:<19} {:<19} {:<19} {:<19} {:<19} {:<19} {:>8}",
            format!("{rate}%"),
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            cols[4],
            cols[5],
            delta
        );
    }
    if !failures.is_empty() {
        let _ = writeln!(out, "failed cells:");
        for failure in failures {
            let _ = writeln!(out, "  {failure}");
        }
    }
    out
}

//! Multi-seed ablation harness behind the `experiment` command.
//!
//! Trains three arms — `baseline` (plain episodic), `meta` (bilevel), and
//! `meta+mlr` (bilevel with statistics mixing) — each across a sweep of
//! training seeds on one generated dataset, evaluates every run on the
//! held-out domain, and reports mean/median/min/max of mAP and
//! Rank-1/5/10 per arm. Summaries go to a CSV (`arm,metric,mean,median,
//! min,max`, twelve data rows) plus a readable table on stdout.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use metareid_core::data::{generate, Dataset};
use metareid_core::eval::{EvalConfig, EvalReport};
use metareid_core::meta::{train, TrainVariant};
use metareid_core::model::ModelConfig;
use metareid_core::tensor::Scalar;

use crate::commands::{heldout_eval, read_data_err, train_err, CliError};
use crate::config::{Precision, RunConfig};

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Summary CSV path (printed to stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seeds per arm.
    #[arg(long, default_value_t = 9)]
    pub train_seeds: usize,
    /// Training iterations per run.
    #[arg(long, default_value_t = 400)]
    pub iters: usize,
    /// Dataset generation seed.
    #[arg(long, default_value_t = 0)]
    pub gen_seed: u64,
    /// f32 or f64 (overrides REID_PRECISION).
    #[arg(long)]
    pub precision: Option<String>,
}

const ARMS: [(&str, TrainVariant); 3] = [
    ("baseline", TrainVariant::Erm),
    ("meta", TrainVariant::Meta { mlr: false }),
    ("meta+mlr", TrainVariant::Meta { mlr: true }),
];

const METRICS: [(&str, fn(&EvalReport) -> f64); 4] = [
    ("mAP", |r| r.map),
    ("rank1", |r| r.rank1),
    ("rank5", |r| r.rank5),
    ("rank10", |r| r.rank10),
];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn run_arm<F: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    name: &str,
    variant: TrainVariant,
    seeds: usize,
) -> Result<Vec<EvalReport>, CliError> {
    let model_cfg = ModelConfig {
        input_dim: ds.feature_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        num_classes: ds.num_ids,
    };
    let eval_cfg = EvalConfig { normalize: cfg.eval_normalize };
    let mut reports = Vec::with_capacity(seeds);
    for seed in 0..seeds {
        let mut tc = cfg.train.clone();
        tc.variant = variant;
        tc.seed = seed as u64;
        let outcome =
            train::<F>(ds, model_cfg.clone(), &tc, |_| {}).map_err(train_err)?;
        let report = heldout_eval(&outcome.params, ds, &eval_cfg)?;
        log::info!(
            "arm {name} seed {seed}: mAP {:.4}, rank1 {:.4} ({} skipped steps)",
            report.map,
            report.rank1,
            outcome.skipped_steps
        );
        reports.push(report);
    }
    Ok(reports)
}

fn run_all<F: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    seeds: usize,
) -> Result<Vec<(&'static str, Vec<EvalReport>)>, CliError> {
    ARMS.iter()
        .map(|&(name, variant)| Ok((name, run_arm::<F>(cfg, ds, name, variant, seeds)?)))
        .collect()
}

fn summary_csv(results: &[(&'static str, Vec<EvalReport>)]) -> String {
    let mut csv = String::from("arm,metric,mean,median,min,max\n");
    for (arm, reports) in results {
        for (metric, extract) in METRICS {
            let vals: Vec<f64> = reports.iter().map(extract).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            writeln!(csv, "{arm},{metric},{},{},{lo},{hi}", mean(&vals), median(&vals))
                .expect("writing to a String cannot fail");
        }
    }
    csv
}

fn summary_table(results: &[(&'static str, Vec<EvalReport>)]) -> String {
    let mut t = format!(
        "{:<10} {:<8} {:>8} {:>8} {:>8} {:>8}\n",
        "arm", "metric", "mean", "median", "min", "max"
    );
    for (arm, reports) in results {
        for (metric, extract) in METRICS {
            let vals: Vec<f64> = reports.iter().map(extract).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                t,
                "{arm:<10} {metric:<8} {:>8.4} {:>8.4} {lo:>8.4} {hi:>8.4}",
                mean(&vals),
                median(&vals),
            );
        }
    }
    t
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    if args.train_seeds == 0 {
        return Err(CliError::Usage("--train-seeds must be at least 1".into()));
    }
    let mut cfg = RunConfig::default();
    cfg.gen.seed = args.gen_seed;
    cfg.train.total_iters = args.iters;
    if let Some(p) = &args.precision {
        cfg.set("train.precision", p)?;
    }
    let precision = cfg.pin_precision()?;
    let ds = generate(&cfg.gen).map_err(read_data_err)?;
    log::info!(
        "running {} arms x {} seeds x {} iters at {} on gen seed {}",
        ARMS.len(),
        args.train_seeds,
        args.iters,
        precision.as_str(),
        args.gen_seed
    );
    let results = match precision {
        Precision::F32 => run_all::<f32>(&cfg, &ds, args.train_seeds)?,
        Precision::F64 => run_all::<f64>(&cfg, &ds, args.train_seeds)?,
    };
    let csv = summary_csv(&results);
    match &args.out {
        Some(path) => {
            crate::commands::ensure_parent(path)?;
            std::fs::write(path, &csv)
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
            print!("{}", summary_table(&results));
            log::info!("wrote summary to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

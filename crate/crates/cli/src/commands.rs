//! The gen-data, train, and eval commands, plus the error type that owns the
//! process exit-code policy.
//!
//! Exit codes: 0 success, 1 failed verification checks, 2 invalid input or
//! configuration, 3 runtime abort. Unreadable or malformed *inputs* (data
//! files, checkpoints, configs) count as validation; failures while writing
//! results, and training aborts, are runtime.

use std::path::{Path, PathBuf};

use clap::Args;
use thiserror::Error;

use metareid_core::data::{generate, load_csv, save_csv, DataError, Dataset, GenSpec};
use metareid_core::eval::{evaluate, EvalConfig, EvalReport};
use metareid_core::meta::{train, TrainError, TrainVariant};
use metareid_core::model::{embed_for_eval, ModelConfig, ModelParams};
use metareid_core::tensor::{Dtype, Scalar};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, Precision, RunConfig};
use crate::metrics::{MetricsRecord, MetricsWriter};

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid flags, configuration, or input files (exit 2).
    #[error("{0}")]
    Usage(String),
    /// A verification check failed (exit 1).
    #[error("{0}")]
    Check(String),
    /// The run itself fell over (exit 3).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Usage(format!("checkpoint: {e}"))
    }
}

/// Input-side data problems are the caller's to fix; only I/O while writing
/// is a runtime failure.
pub(crate) fn read_data_err(e: DataError) -> CliError {
    CliError::Usage(e.to_string())
}

pub(crate) fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteRun { .. } => CliError::Runtime(format!("training aborted: {e}")),
        TrainError::SplitUnsatisfiable { .. } | TrainError::Data(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

// ── gen-data ──

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Distinct identities.
    #[arg(long, default_value_t = GenSpec::default().num_ids)]
    pub ids: usize,
    /// Domains; the highest-numbered one is held out for evaluation.
    #[arg(long, default_value_t = GenSpec::default().num_domains)]
    pub domains: usize,
    /// Rows per (identity, domain) cell.
    #[arg(long, default_value_t = GenSpec::default().rows_per_cell)]
    pub rows_per_cell: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = GenSpec::default().feature_dim)]
    pub dim: usize,
    /// Domain-corruption severity (0 = identically distributed domains).
    #[arg(long, default_value_t = GenSpec::default().severity)]
    pub severity: f64,
    /// Per-coordinate observation noise.
    #[arg(long, default_value_t = GenSpec::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenDataArgs {
    fn spec(&self) -> GenSpec {
        GenSpec {
            num_ids: self.ids,
            num_domains: self.domains,
            rows_per_cell: self.rows_per_cell,
            feature_dim: self.dim,
            severity: self.severity,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

/// Output paths get their parent directories created on demand.
pub(crate) fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let ds = generate(&args.spec()).map_err(read_data_err)?;
    ensure_parent(&args.out)?;
    save_csv(&ds, &args.out)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", args.out.display())))?;
    log::info!(
        "wrote {} rows ({} train, {} query, {} gallery; held-out domain {}) to {}",
        ds.rows.len(),
        ds.train_indices.len(),
        ds.query_indices.len(),
        ds.gallery_indices.len(),
        ds.heldout_domain,
        args.out.display()
    );
    Ok(())
}

// ── train ──

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset CSV (see gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; receives checkpoint.bin, metrics.jsonl, config.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file applied over defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Individual key=value overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Outer iterations (overrides the config).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Training seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plain single-level training: one batch, one loss, no episode split.
    #[arg(long, conflicts_with = "no_mlr")]
    pub baseline: bool,
    /// Bilevel training without the feature-statistics mixing.
    #[arg(long)]
    pub no_mlr: bool,
    /// f32 or f64 (overrides the config and REID_PRECISION).
    #[arg(long)]
    pub precision: Option<String>,
}

/// Resolve defaults → config file → --set pairs → dedicated flags, then pin
/// the precision that will actually be used.
pub fn resolve_train_config(args: &TrainArgs) -> Result<(RunConfig, Precision), CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path).map_err(|e| match e {
            ConfigError::Io(io) => {
                CliError::Usage(format!("config {}: {io}", path.display()))
            }
            other => CliError::from(other),
        })?;
    }
    for pair in &args.set {
        cfg.apply_pair(pair)?;
    }
    if let Some(iters) = args.iters {
        cfg.train.total_iters = iters;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.baseline {
        cfg.train.variant = TrainVariant::Erm;
    } else if args.no_mlr {
        cfg.train.variant = TrainVariant::Meta { mlr: false };
    }
    if let Some(p) = &args.precision {
        cfg.set("train.precision", p)?;
    }
    let precision = cfg.pin_precision()?;
    Ok((cfg, precision))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    load_csv(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        input_dim: ds.feature_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        num_classes: ds.num_ids,
    }
}

fn run_train<F: Scalar>(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<(), CliError> {
    let write_err =
        |e: crate::metrics::MetricsError| CliError::Runtime(format!("writing metrics: {e}"));
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.jsonl")).map_err(write_err)?;
    let mut sink_err = None;
    let outcome = train::<F>(ds, model_config(cfg, ds), &cfg.train, |report| {
        if sink_err.is_none() {
            if let Err(e) = writer.append(&MetricsRecord::from_report(report)) {
                sink_err = Some(e);
            }
        }
    });
    writer.finish().map_err(write_err)?;
    if let Some(e) = sink_err {
        return Err(write_err(e));
    }
    let outcome = outcome.map_err(train_err)?;

    checkpoint::save(&out_dir.join("checkpoint.bin"), &checkpoint::from_params(&outcome.params))
        .map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))?;

    if let Some(last) = outcome.reports.last() {
        log::info!(
            "finished {} iters: L_mtr {:.4}{}, {} skipped",
            outcome.reports.len(),
            last.l_mtr,
            last.l_mte.map(|v| format!(", L_mte {v:.4}")).unwrap_or_default(),
            outcome.skipped_steps
        );
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, precision) = resolve_train_config(args)?;
    let ds = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    std::fs::write(args.out.join("config.txt"), cfg.serialize())
        .map_err(|e| CliError::Runtime(format!("writing config: {e}")))?;
    match precision {
        Precision::F32 => run_train::<f32>(&cfg, &ds, &args.out),
        Precision::F64 => run_train::<f64>(&cfg, &ds, &args.out),
    }
}

// ── eval ──

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV; evaluation runs on its held-out domain.
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip L2 normalization of embeddings before ranking.
    #[arg(long)]
    pub no_normalize: bool,
}

/// Query-vs-gallery retrieval on the dataset's held-out domain.
pub fn heldout_eval<F: Scalar>(
    params: &ModelParams<F>,
    ds: &Dataset,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let embed = |indices: &[usize]| {
        embed_for_eval(params, &ds.features_of(indices))
            .map(|(emb, _)| emb)
            .map_err(|e| CliError::Runtime(e.to_string()))
    };
    let query = embed(&ds.query_indices)?;
    let gallery = embed(&ds.gallery_indices)?;
    evaluate(
        &query,
        &ds.ids_of(&ds.query_indices),
        &gallery,
        &ds.ids_of(&ds.gallery_indices),
        *eval_cfg,
    )
    .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    let input_dim = ck
        .find("w1")
        .filter(|a| a.shape.len() == 2)
        .map(|a| a.shape[0])
        .ok_or_else(|| CliError::Usage("checkpoint: missing or malformed array `w1`".into()))?;
    if input_dim != ds.feature_dim {
        return Err(CliError::Usage(format!(
            "input dimension mismatch: checkpoint expects D={input_dim}, data provides D={}",
            ds.feature_dim
        )));
    }
    let eval_cfg = EvalConfig { normalize: !args.no_normalize };
    let report = match ck.dtype() {
        Some(Dtype::F64) => heldout_eval(&checkpoint::to_params::<f64>(&ck)?, &ds, &eval_cfg)?,
        _ => heldout_eval(&checkpoint::to_params::<f32>(&ck)?, &ds, &eval_cfg)?,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, json + "\n")
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        }
        None => println!("{json}"),
    }
    log::info!(
        "mAP {:.4}, rank1 {:.4}, rank5 {:.4}, rank10 {:.4} ({} queries, {} gallery)",
        report.map,
        report.rank1,
        report.rank5,
        report.rank10,
        report.evaluated_queries,
        report.num_gallery
    );
    Ok(())
}

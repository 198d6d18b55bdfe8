//! Run configuration as a flat `key=value` file.
//!
//! Every generation, model, training, optimizer, loss, and evaluation knob
//! is addressable by a dotted key; anything not set falls back to its
//! default, and unknown keys are rejected rather than ignored. The resolved
//! configuration is written back into each run directory, and because
//! serialization uses Rust's shortest-round-trip float formatting,
//! `parse(serialize(c))` reproduces `c` exactly — re-running from the echoed
//! file reproduces the run.
//!
//! Lines are `key=value`; blank lines and `#` comments are skipped. A key
//! given twice keeps its last value.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use metareid_core::data::GenSpec;
use metareid_core::losses::LossMode;
use metareid_core::meta::{InnerMode, TrainConfig, TrainVariant};

/// Environment variable consulted when no explicit precision is configured.
pub const PRECISION_ENV: &str = "REID_PRECISION";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key=value`, found `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}` ({expected})")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("{PRECISION_ENV}: cannot parse `{0}` (expected `f32` or `f64`)")]
    BadEnvPrecision(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Numeric precision of the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

/// A full run description. `precision: None` means "not pinned yet": it
/// resolves through [`PRECISION_ENV`] and defaults to `f32`, and the echoed
/// config always carries the resolved value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub train: TrainConfig,
    pub eval_normalize: bool,
    pub precision: Option<Precision>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenSpec::default(),
            hidden_dim: 64,
            embed_dim: 32,
            train: TrainConfig::default(),
            eval_normalize: true,
            precision: None,
        }
    }
}

fn parse_as<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn variant_name(v: TrainVariant) -> &'static str {
    match v {
        TrainVariant::Erm => "baseline",
        TrainVariant::Meta { mlr: false } => "meta",
        TrainVariant::Meta { mlr: true } => "meta+mlr",
    }
}

impl RunConfig {
    /// Set one dotted key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expected: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        };
        match key {
            "gen.num_ids" => self.gen.num_ids = parse_as(key, value, "positive integer")?,
            "gen.num_domains" => {
                self.gen.num_domains = parse_as(key, value, "positive integer")?
            }
            "gen.rows_per_cell" => {
                self.gen.rows_per_cell = parse_as(key, value, "positive integer")?
            }
            "gen.feature_dim" => {
                self.gen.feature_dim = parse_as(key, value, "positive integer")?
            }
            "gen.severity" => self.gen.severity = parse_as(key, value, "number")?,
            "gen.noise_sigma" => self.gen.noise_sigma = parse_as(key, value, "number")?,
            "gen.seed" => self.gen.seed = parse_as(key, value, "unsigned integer")?,
            "model.hidden_dim" => self.hidden_dim = parse_as(key, value, "positive integer")?,
            "model.embed_dim" => self.embed_dim = parse_as(key, value, "positive integer")?,
            "train.variant" => {
                self.train.variant = match value {
                    "baseline" => TrainVariant::Erm,
                    "meta" => TrainVariant::Meta { mlr: false },
                    "meta+mlr" => TrainVariant::Meta { mlr: true },
                    _ => return Err(bad("one of baseline|meta|meta+mlr")),
                }
            }
            "train.inner_mode" => {
                self.train.inner_mode = match value {
                    "sgd" => InnerMode::SgdDifferentiable,
                    "adam" => InnerMode::AdamFrozenState,
                    _ => return Err(bad("one of sgd|adam")),
                }
            }
            "train.base_lr" => self.train.base_lr = parse_as(key, value, "number")?,
            "train.inner_lr" => self.train.inner_lr = parse_as(key, value, "number")?,
            "train.warmup_iters" => {
                self.train.warmup_iters = parse_as(key, value, "unsigned integer")?
            }
            "train.total_iters" => {
                self.train.total_iters = parse_as(key, value, "unsigned integer")?
            }
            "train.batch_p" => self.train.batch_p = parse_as(key, value, "positive integer")?,
            "train.batch_k" => self.train.batch_k = parse_as(key, value, "positive integer")?,
            "train.clip_norm" => self.train.clip_norm = parse_as(key, value, "number")?,
            "train.seed" => self.train.seed = parse_as(key, value, "unsigned integer")?,
            "train.include_unmixed_mte" => {
                self.train.include_unmixed_mte = parse_as(key, value, "true or false")?
            }
            "train.force_lambda" => {
                self.train.force_lambda = match value {
                    "none" => None,
                    v => Some(parse_as(key, v, "number or `none`")?),
                }
            }
            "train.max_consecutive_skips" => {
                self.train.max_consecutive_skips = parse_as(key, value, "unsigned integer")?
            }
            "train.precision" => {
                self.precision = Some(Precision::parse(value).ok_or_else(|| bad("f32 or f64"))?)
            }
            "optim.beta1" => self.train.optim.beta1 = parse_as(key, value, "number")?,
            "optim.beta2" => self.train.optim.beta2 = parse_as(key, value, "number")?,
            "optim.eps" => self.train.optim.eps = parse_as(key, value, "number")?,
            "optim.weight_decay" => {
                self.train.optim.weight_decay = parse_as(key, value, "number")?
            }
            "loss.margin" => self.train.loss.margin = parse_as(key, value, "number")?,
            "loss.mode" => {
                self.train.loss.mode = match value {
                    "id+triplet" => LossMode::IdPlusTriplet,
                    "triplet" => LossMode::TripletOnly,
                    _ => return Err(bad("one of id+triplet|triplet")),
                }
            }
            "eval.normalize" => self.eval_normalize = parse_as(key, value, "true or false")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply `key=value` text over the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_str(&text)
    }

    /// One `--set key=value` style pair.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(key.trim(), value.trim())
    }

    /// The precision this run will actually use. An explicit
    /// `train.precision` wins; otherwise [`PRECISION_ENV`] is consulted;
    /// otherwise `f32`.
    pub fn resolved_precision(&self) -> Result<Precision, ConfigError> {
        if let Some(p) = self.precision {
            return Ok(p);
        }
        match std::env::var(PRECISION_ENV) {
            Ok(v) => Precision::parse(&v).ok_or(ConfigError::BadEnvPrecision(v)),
            Err(_) => Ok(Precision::F32),
        }
    }

    /// Pin the resolved precision into the config so the serialized echo
    /// reproduces the run regardless of the environment it is replayed in.
    pub fn pin_precision(&mut self) -> Result<Precision, ConfigError> {
        let p = self.resolved_precision()?;
        self.precision = Some(p);
        Ok(p)
    }

    /// Canonical text form: every key, fixed order. Floats print in Rust's
    /// shortest form that parses back to the identical value.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k}={v}").unwrap();
        };
        s.push_str("# data generation\n");
        kv(&mut s, "gen.num_ids", &self.gen.num_ids);
        kv(&mut s, "gen.num_domains", &self.gen.num_domains);
        kv(&mut s, "gen.rows_per_cell", &self.gen.rows_per_cell);
        kv(&mut s, "gen.feature_dim", &self.gen.feature_dim);
        kv(&mut s, "gen.severity", &self.gen.severity);
        kv(&mut s, "gen.noise_sigma", &self.gen.noise_sigma);
        kv(&mut s, "gen.seed", &self.gen.seed);
        s.push_str("# model\n");
        kv(&mut s, "model.hidden_dim", &self.hidden_dim);
        kv(&mut s, "model.embed_dim", &self.embed_dim);
        s.push_str("# training\n");
        kv(&mut s, "train.variant", &variant_name(self.train.variant));
        let inner = match self.train.inner_mode {
            InnerMode::SgdDifferentiable => "sgd",
            InnerMode::AdamFrozenState => "adam",
        };
        kv(&mut s, "train.inner_mode", &inner);
        kv(&mut s, "train.base_lr", &self.train.base_lr);
        kv(&mut s, "train.inner_lr", &self.train.inner_lr);
        kv(&mut s, "train.warmup_iters", &self.train.warmup_iters);
        kv(&mut s, "train.total_iters", &self.train.total_iters);
        kv(&mut s, "train.batch_p", &self.train.batch_p);
        kv(&mut s, "train.batch_k", &self.train.batch_k);
        kv(&mut s, "train.clip_norm", &self.train.clip_norm);
        kv(&mut s, "train.seed", &self.train.seed);
        kv(&mut s, "train.include_unmixed_mte", &self.train.include_unmixed_mte);
        match self.train.force_lambda {
            Some(l) => kv(&mut s, "train.force_lambda", &l),
            None => kv(&mut s, "train.force_lambda", &"none"),
        }
        kv(&mut s, "train.max_consecutive_skips", &self.train.max_consecutive_skips);
        if let Some(p) = self.precision {
            kv(&mut s, "train.precision", &p.as_str());
        }
        s.push_str("# optimizer\n");
        kv(&mut s, "optim.beta1", &self.train.optim.beta1);
        kv(&mut s, "optim.beta2", &self.train.optim.beta2);
        kv(&mut s, "optim.eps", &self.train.optim.eps);
        kv(&mut s, "optim.weight_decay", &self.train.optim.weight_decay);
        s.push_str("# loss\n");
        kv(&mut s, "loss.margin", &self.train.loss.margin);
        match self.train.loss.mode {
            LossMode::IdPlusTriplet => kv(&mut s, "loss.mode", &"id+triplet"),
            LossMode::TripletOnly => kv(&mut s, "loss.mode", &"triplet"),
        }
        s.push_str("# evaluation\n");
        kv(&mut s, "eval.normalize", &self.eval_normalize);
        s
    }
}

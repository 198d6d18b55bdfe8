//! Per-iteration training metrics as JSON-lines.
//!
//! One object per iteration with the fields `iter`, `L_mtr`, `L_mte`,
//! `grad_norm`, `lr`. Single-level runs have no meta-test loss (`null`), and
//! iterations skipped for non-finite values carry a `null` gradient norm.
//! Field order and float formatting are deterministic, so identical runs
//! produce byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use metareid_core::meta::StepReport;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    #[serde(rename = "L_mtr")]
    pub l_mtr: Option<f64>,
    #[serde(rename = "L_mte")]
    pub l_mte: Option<f64>,
    pub grad_norm: Option<f64>,
    pub lr: f64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl MetricsRecord {
    pub fn from_report(r: &StepReport) -> Self {
        MetricsRecord {
            iter: r.iter,
            l_mtr: finite(r.l_mtr),
            l_mte: r.l_mte.and_then(finite),
            grad_norm: finite(r.grad_norm),
            lr: r.lr,
        }
    }
}

/// Append-only JSONL writer.
pub struct MetricsWriter {
    w: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        Ok(MetricsWriter { w: BufWriter::new(File::create(path)?) })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        // A struct of numbers cannot fail to serialize.
        let line = serde_json::to_string(record).expect("metrics record serializes");
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), MetricsError> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|source| MetricsError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

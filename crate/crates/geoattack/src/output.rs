//! CSV and JSON writers. Floats are printed with Rust's shortest
//! round-trip formatting.

use std::fs;
use std::path::Path;

use anyhow::Context;
use geoattack_core::metrics::ScoreReport;
use geoattack_core::partition::{PartitionEvaluation, TransferMatrix};
use serde::Serialize;

use crate::pipeline::AccuracyRow;

fn writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn joined(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_accuracy(path: &Path, rows: &[AccuracyRow]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["model_id", "arch", "seed", "epochs", "train_accuracy", "test_accuracy"])?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.arch.clone(),
            r.seed.to_string(),
            r.epochs.to_string(),
            f(r.train_accuracy),
            f(r.test_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows are sources, columns targets; the first column names the source.
pub fn write_transfer_matrix(path: &Path, w: &TransferMatrix) -> anyhow::Result<()> {
    let mut out = writer(path)?;
    out.write_record(std::iter::once("source".to_string()).chain(w.ids.iter().cloned()))?;
    for (i, id) in w.ids.iter().enumerate() {
        out.write_record(std::iter::once(id.clone()).chain(w.row(i).iter().map(|&v| f(v))))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_transfer_matrix(path: &Path) -> anyhow::Result<TransferMatrix> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let ids: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().skip(1).map(str::parse::<f64>).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(TransferMatrix::from_rows(ids, &rows)?)
}

pub fn write_records(path: &Path, report: &ScoreReport) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["index", "label", "predicted", "distance", "budget", "k_star", "reward", "success"])?;
    for r in &report.records {
        w.write_record([
            r.index.to_string(),
            r.label.to_string(),
            r.predicted.to_string(),
            f(r.distance),
            f(r.budget),
            r.stop_index.to_string(),
            f(r.reward),
            r.success.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of a score report without the per-record table.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub n0: usize,
    pub transfer_rate: f64,
    pub s_apr: f64,
    pub s_apr_defined: bool,
    pub s_total: f64,
}

impl From<&ScoreReport> for ScoreSummary {
    fn from(r: &ScoreReport) -> Self {
        Self {
            n: r.n,
            n0: r.n0,
            transfer_rate: r.transfer_rate,
            s_apr: r.s_apr,
            s_apr_defined: r.s_apr_defined,
            s_total: r.s_total,
        }
    }
}

/// One row per η (or per budget for the fixed baseline).
pub fn write_sweep(path: &Path, key: &str, rows: &[(f64, ScoreReport)]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record([key, "n", "n0", "transfer_rate", "s_apr", "s_total"])?;
    for (k, r) in rows {
        w.write_record([f(*k), r.n.to_string(), r.n0.to_string(), f(r.transfer_rate), f(r.s_apr), f(r.s_total)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_partitions(path: &Path, rows: &[PartitionEvaluation]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["train", "validation", "loss", "s_total"])?;
    for r in rows {
        w.write_record([
            joined(&r.train),
            joined(&r.validation),
            f(r.loss),
            r.s_total.map(f).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! CSV writers for training logs and benchmark sweeps.

use std::fs;
use std::path::Path;

use overfill_core::perfmodel::CostReport;
use overfill_core::trainer::LogRow;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: usize,
}

/// Replaces the rows of `phase` in the shared training log, keeping the
/// other phases. Phases are written in name order.
pub fn write_training_log(path: &Path, phase: &str, rows: &[LogRow]) -> Result<()> {
    let mut all: Vec<PhaseRow> = if path.exists() {
        read_training_log(path)?.into_iter().filter(|r| r.phase != phase).collect()
    } else {
        Vec::new()
    };
    all.extend(rows.iter().map(|r| PhaseRow {
        phase: phase.to_string(),
        step: r.step,
        lr: r.lr,
        loss: r.loss,
        tokens_seen: r.tokens_seen,
    }));
    // stable, so steps stay in order within a phase
    all.sort_by(|a, b| a.phase.cmp(&b.phase));
    write_rows(path, all)
}

pub fn read_training_log(path: &Path) -> Result<Vec<PhaseRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Serialize)]
struct BenchRow<'a> {
    mode: &'a str,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: usize,
    batch: usize,
    prefill_s: f64,
    decode_s: f64,
    total_s: f64,
    params: u64,
}

pub fn write_costs(path: &Path, reports: &[CostReport]) -> Result<()> {
    write_rows(
        path,
        reports.iter().map(|r| BenchRow {
            mode: r.mode.name(),
            m: r.m,
            n: r.n,
            batch: r.batch,
            prefill_s: r.prefill_s,
            decode_s: r.decode_s,
            total_s: r.total_s,
            params: r.params,
        }),
    )
}

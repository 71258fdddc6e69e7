//! CSV and JSON report writers and the record types they carry.
//!
//! Every record holds `schema_version`. A report rendered as CSV holds one
//! row per record; the JSON rendering wraps the same records as
//! `{"schema_version": .., "rows": [..]}` plus optional summary fields, so
//! the two renderings carry the same values.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Which renderings to emit; `None` means both.
#[derive(Debug, Clone, Copy)]
pub struct Sink<'a> {
    pub dir: &'a Path,
    pub format: Option<Format>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct JsonReport<R, S = ()> {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary: Option<S>,
    pub rows: Vec<R>,
}

impl Sink<'_> {
    pub fn wants(&self, f: Format) -> bool {
        self.format.is_none_or(|x| x == f)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `<stem>.csv` and/or `<stem>.json`; returns the written paths.
    pub fn emit<R: Serialize, S: Serialize>(&self, stem: &str, rows: &[R], summary: Option<S>) -> CliResult<Vec<PathBuf>> {
        let mut written = Vec::new();
        if self.wants(Format::Csv) {
            let p = self.path(&format!("{stem}.csv"));
            write_csv(&p, rows)?;
            written.push(p);
        }
        if self.wants(Format::Json) {
            let p = self.path(&format!("{stem}.json"));
            let report = JsonReport {
                schema_version: SCHEMA_VERSION,
                summary,
                rows: rows.iter().collect(),
            };
            write_json(&p, &report)?;
            written.push(p);
        }
        Ok(written)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Line-delimited JSON, one record per line.
pub struct JsonLines {
    file: File,
    path: PathBuf,
}

impl JsonLines {
    pub fn create(path: &Path) -> CliResult<Self> {
        Ok(Self {
            file: File::create(path).map_err(|e| io_err(path, e))?,
            path: path.to_path_buf(),
        })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").map_err(|e| io_err(&self.path, e))?;
        self.file.flush().map_err(|e| io_err(&self.path, e))
    }
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub schema_version: u32,
    pub plan: String,
    pub method: String,
    pub layers: usize,
    pub width: usize,
    pub r: usize,
    pub entries: usize,
    pub params: u64,
    pub ratio_to_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub schema_version: u32,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub schema_version: u32,
    pub task: String,
    pub plan: String,
    pub method: String,
    pub r: usize,
    pub adapter_params: usize,
    pub head_params: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_eval_acc: f64,
    pub final_eval_acc: f64,
    pub final_eval_loss: f64,
    pub stopped_early: bool,
    pub base_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    /// `overall` or `bin`.
    pub scope: String,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordRecord {
    pub schema_version: u32,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_err: f64,
    pub worst_tensor: Option<String>,
    pub worst_index: Option<usize>,
    pub loss: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub schema_version: u32,
    pub plan: String,
    pub method: String,
    pub seq_len: usize,
    pub batch: usize,
    pub adapter_params: usize,
    pub adapter_bytes: usize,
    /// Bytes held by the tape after forward and backward: an estimate of
    /// the pass's peak activation footprint.
    pub tape_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTimingRecord {
    pub schema_version: u32,
    pub plan: String,
    pub seq_len: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

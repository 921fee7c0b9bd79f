use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const LOG_FILE: &str = "train_log.ndjson";

/// One line of the training log: a step (`kind = "step"`) or an epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: String,
    pub stage: Stage,
    /// `paired` or `unpaired` for steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub epoch: usize,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_lsgan: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_pl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_sind: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_disc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_l_re: Option<f64>,
}

impl LogRecord {
    pub fn step(stage: Stage, phase: &str, epoch: usize, step: u64, r: &LossReport) -> Self {
        Self {
            kind: "step".into(),
            stage,
            phase: Some(phase.into()),
            epoch,
            step,
            l_lsgan: r.l_lsgan,
            l_re: r.l_re,
            l_pl: r.l_pl,
            l_sind: r.l_sind,
            l_disc: r.l_disc,
            l_total: Some(r.l_total),
            val_l_re: None,
        }
    }

    pub fn epoch(stage: Stage, epoch: usize, step: u64, val_l_re: f64) -> Self {
        Self {
            kind: "epoch".into(),
            stage,
            phase: None,
            epoch,
            step,
            l_lsgan: None,
            l_re: None,
            l_pl: None,
            l_sind: None,
            l_disc: None,
            l_total: None,
            val_l_re: Some(val_l_re),
        }
    }

    /// The generator-loss part of a step record.
    pub fn report(&self) -> LossReport {
        LossReport {
            l_lsgan: self.l_lsgan,
            l_re: self.l_re,
            l_pl: self.l_pl,
            l_sind: self.l_sind,
            l_total: self.l_total.unwrap_or(0.0),
            l_disc: self.l_disc,
        }
    }
}

pub(crate) fn append(path: &Path, rec: &LogRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps the first `keep` records of an existing log and returns them.
pub(crate) fn truncate_log(path: &Path, keep: usize) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().take(keep).collect();
    let records = lines
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("train_log", e.to_string())))
        .collect::<Result<Vec<LogRecord>>>()?;
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(records)
}

/// Parses a whole log file.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("train_log", e.to_string())))
        .collect()
}

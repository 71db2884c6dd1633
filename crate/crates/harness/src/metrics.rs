//! Metrics files: one JSON object per line, appended as the run progresses.
//!
//! Every line carries a `kind` tag:
//!
//! ```text
//! {"kind":"eval","env_step":1000,"gradient_step":0,"eval_return":-1187.2,"episode_returns":[...],"updates":0,"diagnostics":{...}}
//! {"kind":"reset","env_step":15000}
//! {"kind":"failed","env_step":15234,"message":"non-finite critic loss"}
//! ```
//!
//! `diagnostics` holds the mean of the per-update rows since the previous
//! eval record (all zero when `updates` is 0). A file cut off at any byte
//! still parses: an unterminated last line is dropped.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bro_core::agent::DiagnosticRow;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub env_step: u64,
    pub gradient_step: u64,
    pub eval_return: f64,
    pub episode_returns: Vec<f64>,
    pub updates: u64,
    pub diagnostics: DiagnosticRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricLine {
    Eval(MetricRecord),
    Reset { env_step: u64 },
    Failed { env_step: u64, message: String },
}

impl MetricLine {
    pub fn env_step(&self) -> u64 {
        match self {
            MetricLine::Eval(r) => r.env_step,
            MetricLine::Reset { env_step } | MetricLine::Failed { env_step, .. } => *env_step,
        }
    }
}

/// Mean of diagnostic rows; all zero for an empty slice.
pub fn mean_diagnostics(rows: &[DiagnosticRow]) -> DiagnosticRow {
    if rows.is_empty() {
        return DiagnosticRow::default();
    }
    let n = rows.len() as f64;
    let m = |f: fn(&DiagnosticRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    DiagnosticRow {
        td_error: m(|r| r.td_error),
        mean_q: m(|r| r.mean_q),
        critic_loss: m(|r| r.critic_loss),
        critic_grad_norm: m(|r| r.critic_grad_norm),
        actor_grad_norm: m(|r| r.actor_grad_norm),
        alpha: m(|r| r.alpha),
        beta_o: m(|r| r.beta_o),
        kl_weight: m(|r| r.kl_weight),
        measured_kl: m(|r| r.measured_kl),
        entropy_estimate: m(|r| r.entropy_estimate),
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncating) the file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(HarnessError::io(path))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            last_step: None,
        })
    }

    /// Appends one line and flushes it.
    pub fn write(&mut self, line: &MetricLine) -> Result<()> {
        if self.last_step.is_some_and(|s| line.env_step() < s) {
            return Err(HarnessError::Corrupt {
                path: self.path.clone(),
                message: format!("record at env step {} after step {:?}", line.env_step(), self.last_step),
            });
        }
        self.last_step = Some(line.env_step());
        let text = serde_json::to_string(line).expect("metric lines serialize");
        writeln!(self.out, "{text}").map_err(HarnessError::io(&self.path))?;
        self.out.flush().map_err(HarnessError::io(&self.path))
    }
}

/// Parsed contents of one metrics file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<MetricLine>,
}

impl MetricsLog {
    pub fn evals(&self) -> impl Iterator<Item = &MetricRecord> {
        self.lines.iter().filter_map(|l| match l {
            MetricLine::Eval(r) => Some(r),
            _ => None,
        })
    }

    pub fn reset_steps(&self) -> Vec<u64> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                MetricLine::Reset { env_step } => Some(*env_step),
                _ => None,
            })
            .collect()
    }

    pub fn failure(&self) -> Option<(u64, &str)> {
        self.lines.iter().find_map(|l| match l {
            MetricLine::Failed { env_step, message } => Some((*env_step, message.as_str())),
            _ => None,
        })
    }

    pub fn final_return(&self) -> Option<f64> {
        self.evals().last().map(|r| r.eval_return)
    }
}

/// Parses metrics text; `path` only labels errors.
pub fn parse_metrics(text: &str, path: &Path) -> Result<MetricsLog> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut log = MetricsLog::default();
    let mut last = None;
    for (i, raw) in complete.lines().enumerate() {
        let err = |message: String| HarnessError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if raw.trim().is_empty() {
            continue;
        }
        let line: MetricLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if let MetricLine::Eval(r) = &line {
            if !r.eval_return.is_finite() || r.episode_returns.iter().any(|x| !x.is_finite()) {
                return Err(err("non-finite return".into()));
            }
        }
        if last.is_some_and(|s| line.env_step() < s) {
            return Err(err(format!("env_step {} goes backwards", line.env_step())));
        }
        last = Some(line.env_step());
        log.lines.push(line);
    }
    Ok(log)
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
    let text = String::from_utf8_lossy(&bytes);
    parse_metrics(&text, path)
}

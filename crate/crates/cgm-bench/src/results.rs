//! Append-only result log with campaign resumability.
//!
//! Every row carries the experiment id, parameter point, metric, value,
//! trial index, wall time, campaign seed and code version. Values are
//! written with 17 significant digits so identical campaigns produce
//! byte-identical files apart from the wall-time column. On completion the
//! log is rewritten in sorted order; a rerun of a partially completed
//! campaign skips `(experiment, point, trial)` groups already present.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use cgm_core::library::format_f64;
use serde::{Deserialize, Serialize};

use crate::BenchError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub point: String,
    pub metric: String,
    pub value: f64,
    pub trial: u64,
    pub wall_ms: f64,
    pub seed: u64,
    pub version: String,
}

impl ResultRow {
    fn group_key(&self) -> (String, String, u64) {
        (self.experiment.clone(), self.point.clone(), self.trial)
    }

    fn sort_key(&self) -> (String, String, u64, String) {
        (
            self.experiment.clone(),
            self.point.clone(),
            self.trial,
            self.metric.clone(),
        )
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.experiment,
            self.point,
            self.metric,
            format_f64(self.value),
            self.trial,
            format_f64(self.wall_ms),
            self.seed,
            self.version
        )
    }

    fn from_csv(line: &str) -> Option<ResultRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return None;
        }
        Some(ResultRow {
            experiment: parts[0].to_string(),
            point: parts[1].to_string(),
            metric: parts[2].to_string(),
            value: parts[3].parse().ok()?,
            trial: parts[4].parse().ok()?,
            wall_ms: parts[5].parse().ok()?,
            seed: parts[6].parse().ok()?,
            version: parts[7].to_string(),
        })
    }
}

pub const CSV_HEADER: &str = "experiment,point,metric,value,trial,wall_ms,seed,version\n";

/// The campaign's result log: loads existing rows for resumability, appends
/// per-trial groups as they finish, and rewrites itself sorted on `finalize`.
pub struct ResultLog {
    path: PathBuf,
    format: LogFormat,
    rows: Vec<ResultRow>,
    done: HashSet<(String, String, u64)>,
}

impl ResultLog {
    pub fn open(out_dir: &Path, format: LogFormat) -> Result<Self, BenchError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| BenchError::Runtime(format!("cannot create {out_dir:?}: {e}")))?;
        let path = out_dir.join(match format {
            LogFormat::Csv => "results.csv",
            LogFormat::Jsonl => "results.jsonl",
        });
        let mut rows = Vec::new();
        if path.exists() {
            let raw = std::fs::read_to_string(&path)
                .map_err(|e| BenchError::Runtime(format!("cannot read {path:?}: {e}")))?;
            for line in raw.lines().skip(usize::from(format == LogFormat::Csv)) {
                if line.is_empty() {
                    continue;
                }
                let row = match format {
                    LogFormat::Csv => ResultRow::from_csv(line),
                    LogFormat::Jsonl => serde_json::from_str(line).ok(),
                };
                if let Some(r) = row {
                    rows.push(r);
                }
            }
        }
        let done = rows.iter().map(|r| r.group_key()).collect();
        Ok(ResultLog {
            path,
            format,
            rows,
            done,
        })
    }

    /// True when the `(experiment, point, trial)` group already has rows.
    pub fn is_done(&self, experiment: &str, point: &str, trial: u64) -> bool {
        self.done
            .contains(&(experiment.to_string(), point.to_string(), trial))
    }

    /// Appends one finished trial group to the log file and the in-memory
    /// view.
    pub fn append_group(&mut self, group: Vec<ResultRow>) -> Result<(), BenchError> {
        if group.is_empty() {
            return Ok(());
        }
        let existed = self.path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BenchError::Runtime(format!("cannot append {:?}: {e}", self.path)))?;
        if !existed && self.format == LogFormat::Csv {
            file.write_all(CSV_HEADER.as_bytes())
                .map_err(|e| BenchError::Runtime(e.to_string()))?;
        }
        for row in &group {
            let line = match self.format {
                LogFormat::Csv => row.to_csv(),
                LogFormat::Jsonl => {
                    let mut s = serde_json::to_string(row)
                        .map_err(|e| BenchError::Runtime(e.to_string()))?;
                    s.push('\n');
                    s
                }
            };
            file.write_all(line.as_bytes())
                .map_err(|e| BenchError::Runtime(e.to_string()))?;
        }
        for row in group {
            self.done.insert(row.group_key());
            self.rows.push(row);
        }
        Ok(())
    }

    /// Rewrites the log sorted by (experiment, point, trial, metric) so a
    /// completed campaign is deterministic regardless of worker scheduling.
    pub fn finalize(&mut self) -> Result<(), BenchError> {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut out = String::new();
        if self.format == LogFormat::Csv {
            out.push_str(CSV_HEADER);
        }
        for row in &self.rows {
            match self.format {
                LogFormat::Csv => out.push_str(&row.to_csv()),
                LogFormat::Jsonl => {
                    out.push_str(
                        &serde_json::to_string(row)
                            .map_err(|e| BenchError::Runtime(e.to_string()))?,
                    );
                    out.push('\n');
                }
            }
        }
        std::fs::write(&self.path, out)
            .map_err(|e| BenchError::Runtime(format!("cannot write {:?}: {e}", self.path)))?;
        Ok(())
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// Values of one metric at one point, ordered by trial.
    pub fn metric_values(&self, experiment: &str, point: &str, metric: &str) -> Vec<f64> {
        let mut pairs: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.experiment == experiment && r.point == point && r.metric == metric)
            .map(|r| (r.trial, r.value))
            .collect();
        pairs.sort_by_key(|(t, _)| *t);
        pairs.into_iter().map(|(_, v)| v).collect()
    }
}

/// Writes an auxiliary CSV (summary tables, derived views) with the crate's
/// decimal formatting.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), BenchError> {
    let mut out = String::new();
    out.push_str(header);
    if !header.ends_with('\n') {
        out.push('\n');
    }
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| BenchError::Runtime(format!("cannot write {path:?}: {e}")))
}

/// Least-squares line fit `y = a + b x` with the coefficient of
/// determination.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

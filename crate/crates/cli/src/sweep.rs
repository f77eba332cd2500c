//! Ablation sweeps: one run per value of a single axis, shared seed.
//!
//! Runs execute on up to `TOKEN_THINNER_THREADS` worker threads (default:
//! available parallelism). Results are gathered and written by the calling
//! thread only.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::{run, RunReport};

pub const THREADS_ENV: &str = "TOKEN_THINNER_THREADS";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Column order of the summary CSV.
pub const SUMMARY_HEADER: [&str; 16] = [
    "axis",
    "value",
    "status",
    "preservation_ratio",
    "placement",
    "combo_tokens",
    "best_epoch",
    "best_val_loss",
    "test_accuracy",
    "test_macro_f1",
    "test_micro_f1",
    "flops",
    "ratio_vs_dense",
    "dense_over_this",
    "peak_activation_bytes",
    "final_keys",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Preservation ratio.
    P,
    Placement,
    /// Number of combination tokens.
    M,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "p" | "preservation-ratio" => Ok(Axis::P),
            "placement" => Ok(Axis::Placement),
            "m" | "combo-tokens" => Ok(Axis::M),
            other => Err(format!("unknown sweep axis `{other}` (expected p, placement or m)")),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::P => "p",
            Axis::Placement => "placement",
            Axis::M => "m",
        }
    }

    /// Base config with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let whole = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        match self {
            Axis::P => cfg.model.preservation_ratio = value,
            Axis::Placement => {
                let l = whole()?;
                cfg.model.placement = (l != 0).then_some(l);
            }
            Axis::M => cfg.model.combo_tokens = whole()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct SweepEntry {
    pub value: f64,
    pub outcome: Result<RunReport>,
}

/// Worker count from the environment, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every value; failures are kept in place and do not stop the sweep.
/// Each run's artifacts go to `out/<axis>-<value>/` when `out` is given.
pub fn sweep(base: &RunConfig, axis: Axis, values: &[f64], out: Option<&Path>, threads: usize) -> Vec<SweepEntry> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let workers = threads.clamp(1, values.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&value) = values.get(i) else { break };
                let dir = out.map(|o| o.join(format!("{}-{value}", axis.name())));
                let outcome = axis
                    .apply(base, value)
                    .and_then(|cfg| run(&cfg, dir.as_deref()))
                    .map(|o| o.report)
                    .map_err(|e| e.context(format!("{} = {value}", axis.name())));
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut results: Vec<Option<Result<RunReport>>> = values.iter().map(|_| None).collect();
    for (i, outcome) in rx {
        results[i] = Some(outcome);
    }
    values
        .iter()
        .zip(results)
        .map(|(&value, outcome)| SweepEntry {
            value,
            outcome: outcome.unwrap_or_else(|| Err(CliError::Data("worker exited without a result".into()))),
        })
        .collect()
}

fn summary_row(axis: Axis, entry: &SweepEntry) -> Vec<String> {
    let mut row = vec![axis.name().to_string(), entry.value.to_string()];
    match &entry.outcome {
        Ok(r) => {
            let m = &r.config.model;
            let t = &r.test.metrics;
            row.extend([
                "ok".to_string(),
                m.preservation_ratio.to_string(),
                m.placement.unwrap_or(0).to_string(),
                m.combo_tokens.to_string(),
                r.best_epoch.to_string(),
                r.best_val_loss.to_string(),
                t.accuracy.to_string(),
                t.macro_f1.to_string(),
                t.micro_f1.to_string(),
                r.cost.total_flops.to_string(),
                r.cost.ratio_vs_dense.to_string(),
                r.cost.dense_over_this.to_string(),
                r.cost.peak_activation_bytes.to_string(),
                r.token_trace.last().map_or(String::new(), |l| l.mean_keys.to_string()),
            ]);
        }
        Err(e) => {
            row.push(format!("failed: {e}"));
            row.extend(std::iter::repeat_n(String::new(), SUMMARY_HEADER.len() - 3));
        }
    }
    row
}

pub fn write_summary(path: &Path, axis: Axis, entries: &[SweepEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for e in entries {
        w.write_record(summary_row(axis, e))?;
    }
    w.flush()?;
    Ok(())
}

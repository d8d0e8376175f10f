//! Run reports: pretty JSON plus a flat CSV of loss traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::{BenchConfig, Task};
use crate::error::{BenchError, Result};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "MLO_BENCH_OUT_DIR";

/// A pass/fail check with the measured value and its threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub task: Task,
    pub seed: u64,
    /// Resolved config, defaults applied.
    pub config: BenchConfig,
    /// Per-problem cost of every step, keyed `run/problem`.
    pub loss_traces: BTreeMap<String, Vec<f64>>,
    pub metrics: BTreeMap<String, f64>,
    /// Structured task output (path listings, learned weights).
    pub details: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub warnings: BTreeMap<String, usize>,
    /// Peak bytes of live tensor buffers during the run.
    pub peak_alloc_bytes: i64,
    pub wall_time_seconds: f64,
}

impl RunReport {
    pub fn new(task: Task, config: BenchConfig) -> Self {
        RunReport {
            task,
            seed: config.seed,
            config,
            loss_traces: BTreeMap::new(),
            metrics: BTreeMap::new(),
            details: BTreeMap::new(),
            checks: Vec::new(),
            warnings: BTreeMap::new(),
            peak_alloc_bytes: 0,
            wall_time_seconds: 0.0,
        }
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    /// Passes when `value <= threshold`.
    pub fn check_at_most(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        });
    }

    /// Passes when `value >= threshold`.
    pub fn check_at_least(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        });
    }

    pub fn check_flag(&mut self, name: impl Into<String>, passed: bool) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            value: f64::from(u8::from(passed)),
            threshold: 1.0,
        });
    }

    pub fn merge_warnings(&mut self, warnings: &BTreeMap<String, usize>) {
        for (k, v) in warnings {
            *self.warnings.entry(k.clone()).or_default() += v;
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `trace,step,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trace,step,loss\n");
        for (name, trace) in &self.loss_traces {
            for (i, v) in trace.iter().enumerate() {
                let _ = writeln!(out, "{name},{i},{v}");
            }
        }
        out
    }
}

/// Where a report goes: `--out`, then the config's `output`, then
/// `$MLO_BENCH_OUT_DIR/<task>-seed<seed>.json`, then `bench-out/`.
pub fn output_path(cli: Option<&Path>, config: &BenchConfig, task: Task) -> PathBuf {
    if let Some(p) = cli.or(config.output.as_deref()) {
        return p.to_path_buf();
    }
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("bench-out"));
    dir.join(format!("{task}-seed{}.json", config.seed))
}

/// Write the JSON report and its CSV sibling; returns the CSV path.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<PathBuf> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| BenchError::Io { path: p, source }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, report.to_json()).map_err(io(path))?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, report.to_csv()).map_err(io(&csv))?;
    Ok(csv)
}

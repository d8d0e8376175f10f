//! Benchmark configuration: one strict JSON document.
//!
//! Every field has a default, so `{}` is a valid config. Per-problem blocks
//! under `problems` override individual [`ProblemConfig`] fields of a task's
//! named problems; the remaining fields keep the task's defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use mlo_core::graph::DependencyGraph;
use mlo_core::problem::ProblemConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{BenchError, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Gradcheck,
    Paths,
    Oracle,
    Mixture,
    Reweight,
    Trilevel,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Gradcheck => "gradcheck",
            Task::Paths => "paths",
            Task::Oracle => "oracle",
            Task::Mixture => "mixture",
            Task::Reweight => "reweight",
            Task::Trilevel => "trilevel",
        }
    }

    /// Problems whose settings a config may override.
    pub fn problem_names(self) -> &'static [&'static str] {
        match self {
            Task::Mixture => &["readout", "architecture"],
            Task::Reweight => &["classifier", "meta_weight"],
            Task::Trilevel => &["pretrain", "finetune", "reweight"],
            _ => &[],
        }
    }

    pub fn default_iterations(self) -> usize {
        match self {
            Task::Mixture => 400,
            Task::Reweight => 1500,
            Task::Trilevel => 10_000,
            _ => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub cases_per_op: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Register an op with a deliberately wrong backward rule.
    pub include_corrupted: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases_per_op: 6,
            step: 1e-5,
            tolerance: 1e-5,
            include_corrupted: false,
        }
    }
}

/// An inline dependency graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSpec {
    pub problems: Vec<String>,
    pub u2l: BTreeMap<String, BTreeSet<String>>,
    pub l2u: BTreeMap<String, BTreeSet<String>>,
}

impl GraphSpec {
    pub fn graph(&self) -> DependencyGraph {
        DependencyGraph {
            u2l: self.u2l.clone(),
            l2u: self.l2u.clone(),
        }
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.problems.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub graph: Option<GraphSpec>,
    pub random_graphs: usize,
    pub min_problems: usize,
    pub max_problems: usize,
    /// Probability of each kind of edge between two levels.
    pub edge_probability: f64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            graph: None,
            random_graphs: 1000,
            min_problems: 2,
            max_problems: 8,
            edge_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub inner_lr: f64,
    pub itd_steps: usize,
    pub neumann_orders: Vec<usize>,
    pub neumann_alpha: f64,
    pub cg_tolerance: f64,
    pub neumann_tolerance: f64,
    pub itd_tolerance: f64,
    pub fd_tolerance: f64,
    pub pipeline_tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            inner_lr: 0.1,
            itd_steps: 500,
            neumann_orders: vec![1, 10, 100],
            neumann_alpha: 0.1,
            cg_tolerance: 1e-6,
            neumann_tolerance: 1e-3,
            itd_tolerance: 1e-3,
            fd_tolerance: 1e-4,
            pipeline_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Index (from 0) of the feature map generating the targets.
    pub true_map: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub noise: f64,
    pub batch_size: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            input_dim: 3,
            feature_dim: 8,
            true_map: 2,
            train_samples: 200,
            val_samples: 200,
            noise: 0.1,
            batch_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    pub dim: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub imbalance_factor: f64,
    pub majority_samples: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub weight_net_hidden: usize,
    /// Divide the weighted loss by the sum of the batch weights.
    pub normalize_weights: bool,
    pub run_baseline: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            dim: 2,
            separation: 1.0,
            imbalance_factor: 10.0,
            majority_samples: 500,
            val_per_class: 25,
            test_per_class: 1000,
            batch_size: 100,
            hidden: 16,
            weight_net_hidden: 100,
            normalize_weights: false,
            run_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrilevelConfig {
    pub dim: usize,
    pub separation: f64,
    pub source_samples: usize,
    pub corrupt_fraction: f64,
    /// Offset of the corrupted cluster; 0 leaves corrupted samples in place
    /// with only their labels flipped.
    pub shift: f64,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
    pub proximal: f64,
    pub batch_size: usize,
    pub weight_net_hidden: usize,
    pub run_baseline: bool,
}

impl Default for TrilevelConfig {
    fn default() -> Self {
        TrilevelConfig {
            dim: 30,
            separation: 1.0,
            source_samples: 600,
            corrupt_fraction: 0.3,
            shift: 3.0,
            target_train: 20,
            target_val: 100,
            target_test: 2000,
            proximal: 0.01,
            batch_size: 100,
            weight_net_hidden: 16,
            run_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Must match the subcommand when present.
    pub task: Option<Task>,
    pub seed: u64,
    /// Steps of each lowermost problem; defaults per task.
    pub global_iterations: Option<usize>,
    /// Field overrides for the task's named problems.
    pub problems: BTreeMap<String, Map<String, Value>>,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
    pub oracle: OracleConfig,
    pub mixture: MixtureConfig,
    pub reweight: ReweightConfig,
    pub trilevel: TrilevelConfig,
    /// Report path; the CSV of loss traces is written next to it.
    pub output: Option<PathBuf>,
}

pub fn parse_config(text: &str) -> Result<BenchConfig> {
    serde_json::from_str(text).map_err(|e| BenchError::config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<BenchConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text).map_err(|e| BenchError::config(format!("{}: {e}", path.display())))
}

fn positive(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        return Err(BenchError::config(format!("{what} must be at least 1")));
    }
    Ok(())
}

impl BenchConfig {
    pub fn iterations(&self, task: Task) -> usize {
        self.global_iterations.unwrap_or(task.default_iterations())
    }

    /// A task default overlaid with the config's block for `name`.
    pub fn problem_config(&self, name: &str, default: ProblemConfig) -> Result<ProblemConfig> {
        let Some(overrides) = self.problems.get(name) else {
            return Ok(default);
        };
        let Value::Object(mut merged) = serde_json::to_value(&default).expect("config serializes")
        else {
            unreachable!("problem config is a struct");
        };
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        let cfg: ProblemConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| BenchError::config(format!("problems.{name}: {e}")))?;
        cfg.validate()
            .map_err(|e| BenchError::config(format!("problems.{name}: {e}")))?;
        Ok(cfg)
    }

    /// Check the settings relevant to `task` and return the config with the
    /// task and its iteration count filled in.
    pub fn resolve(&self, task: Task) -> Result<BenchConfig> {
        if let Some(t) = self.task {
            if t != task {
                return Err(BenchError::config(format!(
                    "config is for task `{t}` but `{task}` was requested"
                )));
            }
        }
        let allowed = task.problem_names();
        if let Some(bad) = self
            .problems
            .keys()
            .find(|k| !allowed.contains(&k.as_str()))
        {
            return Err(BenchError::config(format!(
                "task `{task}` has no problem named `{bad}` (expected one of {allowed:?})"
            )));
        }
        positive(self.iterations(task), "global_iterations")?;
        match task {
            Task::Gradcheck => {
                positive(self.gradcheck.cases_per_op, "gradcheck.cases_per_op")?;
                if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
                    return Err(BenchError::config(
                        "gradcheck step and tolerance must be positive",
                    ));
                }
            }
            Task::Paths => {
                let p = &self.paths;
                if p.min_problems < 1 || p.min_problems > p.max_problems || p.max_problems > 10 {
                    return Err(BenchError::config(
                        "paths needs 1 <= min_problems <= max_problems <= 10",
                    ));
                }
                if !(0.0..=1.0).contains(&p.edge_probability) {
                    return Err(BenchError::config(
                        "paths.edge_probability must lie in [0, 1]",
                    ));
                }
            }
            Task::Oracle => {
                let o = &self.oracle;
                positive(o.itd_steps, "oracle.itd_steps")?;
                if o.neumann_orders.is_empty() {
                    return Err(BenchError::config("oracle.neumann_orders is empty"));
                }
                for &k in &o.neumann_orders {
                    positive(k, "oracle.neumann_orders entries")?;
                }
                if !(o.inner_lr > 0.0 && o.neumann_alpha > 0.0) {
                    return Err(BenchError::config("oracle learning rates must be positive"));
                }
            }
            Task::Mixture => {
                let m = &self.mixture;
                positive(m.input_dim, "mixture.input_dim")?;
                positive(m.feature_dim, "mixture.feature_dim")?;
                positive(m.train_samples, "mixture.train_samples")?;
                positive(m.val_samples, "mixture.val_samples")?;
                positive(m.batch_size, "mixture.batch_size")?;
                if m.true_map >= 3 {
                    return Err(BenchError::config("mixture.true_map must be 0, 1 or 2"));
                }
            }
            Task::Reweight => {
                let r = &self.reweight;
                if r.imbalance_factor.is_nan() || r.imbalance_factor < 1.0 {
                    return Err(BenchError::config(format!(
                        "reweight.imbalance_factor must be >= 1, got {}",
                        r.imbalance_factor
                    )));
                }
                positive(r.dim, "reweight.dim")?;
                positive(r.majority_samples, "reweight.majority_samples")?;
                positive(r.val_per_class, "reweight.val_per_class")?;
                positive(r.test_per_class, "reweight.test_per_class")?;
                positive(r.batch_size, "reweight.batch_size")?;
                positive(r.hidden, "reweight.hidden")?;
                positive(r.weight_net_hidden, "reweight.weight_net_hidden")?;
            }
            Task::Trilevel => {
                let t = &self.trilevel;
                if !(0.0..1.0).contains(&t.corrupt_fraction) {
                    return Err(BenchError::config(
                        "trilevel.corrupt_fraction must lie in [0, 1)",
                    ));
                }
                if t.proximal.is_nan() || t.proximal < 0.0 {
                    return Err(BenchError::config("trilevel.proximal must be non-negative"));
                }
                positive(t.dim, "trilevel.dim")?;
                positive(t.source_samples, "trilevel.source_samples")?;
                positive(t.target_train, "trilevel.target_train")?;
                positive(t.target_val, "trilevel.target_val")?;
                positive(t.target_test, "trilevel.target_test")?;
                positive(t.batch_size, "trilevel.batch_size")?;
                positive(t.weight_net_hidden, "trilevel.weight_net_hidden")?;
            }
        }
        let mut resolved = self.clone();
        resolved.task = Some(task);
        resolved.global_iterations = Some(self.iterations(task));
        Ok(resolved)
    }

    /// Record the full settings actually used for a problem.
    pub fn echo_problem(&mut self, name: &str, cfg: &ProblemConfig) {
        if let Value::Object(map) = serde_json::to_value(cfg).expect("config serializes") {
            self.problems.insert(name.to_string(), map);
        }
    }
}

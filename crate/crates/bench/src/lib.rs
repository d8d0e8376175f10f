//! Benchmarks for `mlo-core`: gradient checks, path verification, analytic
//! hypergradient oracles and three small multilevel learning tasks.

pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod tasks;

use std::time::Instant;

use mlo_core::tensor::alloc;

pub use config::{BenchConfig, Task};
pub use error::{BenchError, Result};
pub use report::RunReport;

/// Resolve `config` for `task`, run it, and fill in timing and peak allocation.
pub fn run_task(task: Task, config: &BenchConfig) -> Result<RunReport> {
    let resolved = config.resolve(task)?;
    let start = Instant::now();
    let (report, stats) = alloc::measure(|| match task {
        Task::Gradcheck => tasks::gradcheck::run(&resolved),
        Task::Paths => tasks::paths::run(&resolved),
        Task::Oracle => tasks::oracle::run(&resolved),
        Task::Mixture => tasks::mixture::run(&resolved),
        Task::Reweight => tasks::reweight::run(&resolved),
        Task::Trilevel => tasks::trilevel::run(&resolved),
    });
    let mut report = report?;
    report.peak_alloc_bytes = stats.peak_bytes;
    report.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mlo_bench::config::{load_config, BenchConfig};
use mlo_bench::report::{emit_report, output_path};
use mlo_bench::{run_task, BenchError, Task};

/// Run one benchmark and write a JSON report plus a CSV of loss traces.
///
/// Exit status: 0 when every check passes, 1 on a failed check or runtime
/// error, 2 on a configuration or usage error.
#[derive(Debug, Parser)]
#[command(name = "mlo-bench", version)]
struct Cli {
    /// Benchmark to run.
    #[arg(value_enum)]
    task: Task,

    /// JSON config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Report path; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn execute(cli: &Cli) -> Result<bool, BenchError> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let report = run_task(cli.task, &config)?;
    let path = output_path(cli.out.as_deref(), &config, cli.task);
    let csv = emit_report(&report, &path)?;
    if !cli.quiet {
        println!(
            "{} seed={} wall={:.2}s",
            report.task, report.seed, report.wall_time_seconds
        );
        for (k, v) in &report.metrics {
            println!("  {k} = {v}");
        }
        for c in &report.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            println!(
                "  [{mark}] {} value={:e} threshold={:e}",
                c.name, c.value, c.threshold
            );
        }
        for (w, n) in &report.warnings {
            println!("  warning x{n}: {w}");
        }
        println!("report: {}", path.display());
        println!("losses: {}", csv.display());
    }
    for c in report.failed_checks() {
        eprintln!(
            "check failed: {} (value {}, threshold {})",
            c.name, c.value, c.threshold
        );
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dtdlab_core::exec::Execution;
use dtdlab_core::harness::{self, ExperimentConfig, PlotStyle};

#[derive(Parser)]
#[command(name = "dtdlab", version, about = "Distributed TD policy evaluation experiments")]
struct Cli {
    /// Run repetitions one after another instead of in parallel.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace.csv, summary.csv, meta.json and plot.svg.
    Run {
        config: PathBuf,
        /// Write under this directory instead of the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Redraw plot.svg for an existing run directory.
    Plot {
        run_dir: PathBuf,
        #[arg(long)]
        loglog: bool,
    },
    /// Build and sample-check both Lyapunov certificates for a config.
    Certify { config: PathBuf },
    /// Run one experiment per value of a dotted config path.
    Sweep {
        config: PathBuf,
        /// Dotted path into the config, e.g. algorithm.schedule.alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values; JSON literals where they parse, strings otherwise.
        #[arg(long)]
        values: String,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn run(config: &Path, out: Option<PathBuf>, exec: Execution) -> Result<()> {
    let cfg = load(config)?;
    let record = harness::run_with(&cfg, exec)?;
    let root = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let dir = harness::write_run(&record, &root)?;
    harness::emit_plot(&dir, PlotStyle::Linear)?;
    let summary = record.summary();
    let last = summary.last();
    println!("run {} -> {}", record.config_hash, dir.display());
    println!(
        "  {} repetitions, {} diverged, {:.2}s",
        record.reps.len(),
        record.diverged_count(),
        record.wall_clock_secs
    );
    if let Some(row) = last {
        println!("  k = {}: error {:.6e} ± {:.3e}", row.k, row.mean, row.std);
    }
    Ok(())
}

fn plot(run_dir: &Path, loglog: bool) -> Result<()> {
    let style = if loglog { PlotStyle::LogLog } else { PlotStyle::Linear };
    let path = harness::emit_plot(run_dir, style).with_context(|| format!("plotting {}", run_dir.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn certify(config: &Path) -> Result<bool> {
    let cfg = load(config)?;
    let report = harness::certify(&cfg)?;
    for c in &report.bounds.checks {
        println!(
            "bound {:<20} {:>12.6e} <= {:<12.6e} {}",
            c.name,
            c.value,
            c.limit,
            if c.passed { "ok" } else { "VIOLATED" }
        );
    }
    for c in &report.certificates {
        println!(
            "{:<12} beta = {:.6e}  kappa = {:.6e}  rate = {:.6e}  sandwich {}  violations {}/{} (max {:.3e})",
            c.name,
            c.beta,
            c.kappa,
            c.rate,
            if c.sandwich { "ok" } else { "FAILED" },
            c.report.violations,
            c.report.samples,
            c.report.max_violation
        );
    }
    println!("{}", if report.passed() { "certified" } else { "NOT certified" });
    Ok(report.passed())
}

fn sweep(config: &Path, param: &str, values: &str, exec: Execution) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let base: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let values = harness::parse_values(values)?;
    let (index, points) = harness::sweep(&base, param, &values, exec)?;
    for p in &points {
        println!(
            "{param} = {}: plateau {}, diverged {}/{} -> {}",
            p.value,
            p.plateau.map_or("-".into(), |v| format!("{v:.6e}")),
            p.diverged,
            p.repetitions,
            p.run_dir.display()
        );
    }
    println!("{}", index.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = match cli.command {
        Command::Run { config, out } => run(&config, out, exec).map(|_| true),
        Command::Plot { run_dir, loglog } => plot(&run_dir, loglog).map(|_| true),
        Command::Certify { config } => certify(&config),
        Command::Sweep { config, param, values } => sweep(&config, &param, &values, exec).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

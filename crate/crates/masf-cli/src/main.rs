use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use masf_cli::config::{load_experiment_spec, load_run_spec};
use masf_cli::runner::{execute_run, simulate_to_dir, RunRequest, RunStatus};
use masf_cli::{report, sweep, verify};

/// Sequential data assimilation with measurement-aware score-based filtering.
#[derive(Parser)]
#[command(name = "masf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a truth trajectory and synthetic measurements.
    Simulate {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one filtering experiment end to end.
    Assimilate {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Re-run even when the directory holds a completed identical run.
        #[arg(long)]
        force: bool,
        /// Record per-step sampler diagnostics to trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Run a sweep over seeds, methods and config axes.
    Sweep {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-run completed runs instead of skipping them.
        #[arg(long)]
        force: bool,
        /// Parallel runs (each run is itself internally parallel).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Record per-step sampler diagnostics for every run.
        #[arg(long)]
        trace: bool,
    },
    /// Aggregate run manifests under a directory into a summary.
    Report {
        /// Directory holding run directories (e.g. a sweep output dir).
        #[arg(long)]
        dir: PathBuf,
        /// Output format: csv, json or markdown.
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run quick self-checks of the core machinery.
    Verify,
}

/// Ok(true): success. Ok(false): runs failed (exit 1). Err: config or
/// environment error (exit 2).
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let (mut spec, warnings) = load_run_spec(&config)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            simulate_to_dir(&spec, &out)?;
            eprintln!("wrote truth and measurements to {}", out.display());
            Ok(true)
        }
        Command::Assimilate {
            config,
            out,
            seed,
            force,
            trace,
        } => {
            let (mut spec, warnings) = load_run_spec(&config)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let outcome = execute_run(&RunRequest {
                spec,
                dir: out,
                cache_dir: None,
                sweep_point: Vec::new(),
                trace,
                force,
            })?;
            match outcome.status {
                RunStatus::Skipped => {
                    eprintln!(
                        "identical completed run already in {}; use --force to re-run",
                        outcome.dir.display()
                    );
                    Ok(true)
                }
                RunStatus::Complete => {
                    match outcome.rmse {
                        Some(r) => eprintln!("run complete, rmse {r:.4}"),
                        None => eprintln!("run complete"),
                    }
                    Ok(true)
                }
                RunStatus::Failed => {
                    eprintln!(
                        "run failed: {}",
                        outcome.message.as_deref().unwrap_or("unknown failure")
                    );
                    Ok(false)
                }
            }
        }
        Command::Sweep {
            config,
            out,
            force,
            jobs,
            trace,
        } => {
            if jobs == 0 {
                bail!("--jobs must be >= 1");
            }
            let exp = load_experiment_spec(&config)?;
            let (rows, all_ok) = sweep::run_sweep(&exp, out.as_deref(), force, jobs, trace)?;
            print!("{}", report::render_markdown(&rows));
            Ok(all_ok)
        }
        Command::Report { dir, format, out } => {
            let manifests = report::collect_manifests(&dir)?;
            if manifests.is_empty() {
                bail!("no run manifests found under {}", dir.display());
            }
            let rows = report::summarize(&manifests);
            let rendered = report::render(&rows, &format)?;
            match out {
                Some(path) => std::fs::write(&path, rendered)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{rendered}"),
            }
            Ok(true)
        }
        Command::Verify => {
            let checks = verify::run_all();
            let mut all_ok = true;
            for check in &checks {
                match &check.outcome {
                    Ok(detail) => println!("PASS {} — {detail}", check.name),
                    Err(detail) => {
                        all_ok = false;
                        println!("FAIL {} — {detail}", check.name);
                    }
                }
            }
            Ok(all_ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! Command-line front end: `run`, `sweep` and `verify`.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use commands::{cmd_run, cmd_sweep, Axis, RunStatus};

/// Exit status of a run stopped by the divergence guard.
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "egl", version, about = "Deterministic distributed-SGD simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long, value_parser = seed_parser())]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
    },
    /// Run the cartesian product of the axes for every seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`, repeatable.
        #[arg(long = "axis", required = true)]
        axes: Vec<Axis>,
        #[arg(long, value_delimiter = ',', required = true, value_parser = seed_parser())]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the built-in invariant checks.
    Verify,
}

/// Seeds must fit a TOML integer so the resolved config can record them.
fn seed_parser() -> clap::builder::RangedU64ValueParser<u64> {
    clap::value_parser!(u64).range(..=i64::MAX as u64)
}

/// Worker threads from `EGL_THREADS`; unset means single-threaded.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("EGL_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(anyhow!("EGL_THREADS: {e}")),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(anyhow!("EGL_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            force,
        } => {
            let threads = threads_from_env()?;
            let mut cfg = config::parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match cmd_run(&cfg, &out, force, threads)? {
                RunStatus::Completed(last) => {
                    if let Some(r) = last {
                        println!(
                            "step {}: rank-0 accuracy {:.4}, aggregate accuracy {:.4}",
                            r.step, r.rank0_acc, r.aggregate_acc
                        );
                    }
                    Ok(ExitCode::SUCCESS)
                }
                RunStatus::Diverged(d) => {
                    eprintln!("diverged at step {}: {}", d.step, d.reason);
                    Ok(ExitCode::from(EXIT_DIVERGED))
                }
            }
        }
        Command::Sweep {
            config,
            axes,
            seeds,
            out,
            force,
        } => {
            let threads = threads_from_env()?;
            let cells = cmd_sweep(&config, &axes, &seeds, &out, force, threads)?;
            let failed = cells.iter().filter(|c| !c.succeeded()).count();
            println!("{} cells, {failed} failed", cells.len());
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Verify => {
            let results = egl_core::verify::run_all();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

//! Command-line entry point: train one run, sweep a learning-rate grid,
//! verify the property suites, plot learning curves, or probe latent
//! gradient norms.

mod config;
mod plot;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "metarl", version, about = "Meta-RL training and experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (defaults to the config's out_dir or runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (learning rate, seed) cell and select the best rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel cells.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the property-check suites; nonzero exit on any failure.
    Verify,
    /// Plot learning curves from run directories.
    Plot {
        /// Run directories (sibling seeds of one method group together).
        dirs: Vec<PathBuf>,
        /// Output SVG path; a .tsv table lands beside it.
        #[arg(long, default_value = "curves.svg")]
        out: PathBuf,
        /// Smoothing window (moving average, valid padding).
        #[arg(long, default_value_t = 9)]
        window: usize,
        /// Bootstrap resamples for the confidence bands.
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
    },
    /// Short training run with the latent-gradient probe enabled.
    GradProbe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            run::cmd_train(&cfg, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { config, seed, out, workers } => {
            let cfg = load_config(&config, seed)?;
            match sweep::cmd_sweep(&cfg, out.as_deref(), workers)? {
                sweep::SweepStatus::Complete => Ok(ExitCode::SUCCESS),
                sweep::SweepStatus::Partial => Ok(ExitCode::from(2)),
            }
        }
        Cmd::Verify => {
            let results = metarl::verify::run_all_checks();
            let mut failed = 0;
            for r in &results {
                if r.passed {
                    println!("PASS {}", r.name);
                } else {
                    println!("FAIL {} — {}", r.name, r.detail);
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", results.len(), failed);
            if failed == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Plot { dirs, out, window, resamples } => {
            plot::cmd_plot(&dirs, &out, window, resamples)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GradProbe { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            run::cmd_grad_probe(&cfg, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

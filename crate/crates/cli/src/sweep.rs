//! Learning-rate sweep driver: one run directory per (lr, seed) cell, a
//! sweep.json with the selected rate and the aggregated band.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;

use metarl::analysis::{select_and_aggregate, CellOutcome, SweepSpec};

use crate::config::RunConfig;
use crate::run::{cmd_train, resolve_run_dir};

pub enum SweepStatus {
    Complete,
    Partial,
}

pub fn cmd_sweep(cfg: &RunConfig, out_flag: Option<&Path>, workers: usize) -> Result<SweepStatus> {
    let root = resolve_run_dir(cfg, out_flag);
    fs::create_dir_all(&root)?;
    let lrs = cfg.sweep_lrs();
    let seeds = cfg.sweep_seeds();
    let jobs: Vec<(f64, u64)> =
        lrs.iter().flat_map(|&lr| seeds.iter().map(move |&s| (lr, s))).collect();

    // Cells are independent; run them in a bounded pool. Each cell gets its
    // own run directory and appends its own logs.
    let pool = rayon_pool(workers);
    let cells: Vec<CellOutcome> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(lr, seed)| run_cell(cfg, &root, lr, seed))
            .collect()
    });

    let spec = SweepSpec {
        method: cfg.method().expect("validated"),
        env: cfg.env_kind().expect("validated"),
        sizes: cfg.sizes(),
        cfg: cfg.ppo(),
        budget: cfg.budget()?,
        seeds,
        lrs,
        ci_level: cfg.ci_level,
        resamples: cfg.resamples,
        selection_tail: cfg.selection_tail,
        probe: cfg.probe_latent_grad,
    };
    let failed = cells.iter().filter(|c| matches!(c, CellOutcome::Failed { .. })).count();
    let result = select_and_aggregate(&spec, cells)?;
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
    println!(
        "sweep over {} cells: best lr {} ({} failed) -> {}",
        jobs_len(&spec),
        result.best_lr,
        failed,
        root.join("sweep.json").display()
    );
    Ok(if failed == 0 { SweepStatus::Complete } else { SweepStatus::Partial })
}

fn jobs_len(spec: &SweepSpec) -> usize {
    spec.lrs.len() * spec.seeds.len()
}

fn rayon_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

fn run_cell(cfg: &RunConfig, root: &Path, lr: f64, seed: u64) -> CellOutcome {
    let mut cell_cfg = cfg.clone();
    cell_cfg.policy_lr = Some(lr);
    cell_cfg.seed = seed;
    cell_cfg.sweep_lrs = None;
    cell_cfg.sweep_seeds = None;
    let dir: PathBuf = root.join(format!("lr{lr:e}-seed{seed}"));
    cell_cfg.out_dir = Some(dir.display().to_string());
    match cmd_train(&cell_cfg, None) {
        Ok(run_dir) => {
            let log = match fs::read_to_string(run_dir.join("log.jsonl")) {
                Ok(l) => l,
                Err(e) => {
                    return CellOutcome::Failed { lr, seed, reason: e.to_string() };
                }
            };
            match log.lines().map(serde_json::from_str).collect::<Result<Vec<_>, _>>() {
                Ok(records) => CellOutcome::Finished { lr, seed, records },
                Err(e) => CellOutcome::Failed { lr, seed, reason: e.to_string() },
            }
        }
        Err(e) => CellOutcome::Failed { lr, seed, reason: e.to_string() },
    }
}

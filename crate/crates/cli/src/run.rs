//! Run-directory layout and the train / grad-probe drivers.
//!
//! ```text
//! <run>/config.toml        frozen copy of the run configuration
//! <run>/log.jsonl          one RunRecord per meta update (append-only)
//! <run>/pretrain.jsonl     multi-task phase progress
//! <run>/trajectories.jsonl optional debugging dumps
//! <run>/checkpoints/ckpt-<update>.{bin,manifest.json,state.json}
//! <run>/summary.json       final metrics
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metarl::analysis::{selection_score, RunRecord, SessionOptions, TrainSession};
use metarl::checkpoint::{load_params, save_params};
use metarl::envs::Transition;
use metarl::trainer::DualAdam;

use crate::config::RunConfig;

pub const OUT_ROOT_ENV: &str = "METARL_OUT_ROOT";

/// Resolve the run directory: explicit --out, then the config's out_dir,
/// then `$METARL_OUT_ROOT/<derived>`, then `runs/<derived>`.
pub fn resolve_run_dir(cfg: &RunConfig, out_flag: Option<&Path>) -> PathBuf {
    if let Some(out) = out_flag {
        return out.to_path_buf();
    }
    if let Some(dir) = &cfg.out_dir {
        return PathBuf::from(dir);
    }
    let derived = format!(
        "{}-{}-seed{}",
        cfg.method.replace(['+', ' '], "_"),
        cfg.env,
        cfg.seed
    );
    match std::env::var(OUT_ROOT_ENV) {
        Ok(root) if !root.is_empty() => PathBuf::from(root).join(derived),
        _ => PathBuf::from("runs").join(derived),
    }
}

/// Sidecar state of one checkpoint: counters, config digest, optimizer.
#[derive(Serialize, Deserialize)]
pub struct CheckpointState {
    pub run_id: String,
    pub update_index: u64,
    pub frames: u64,
    pub params_stem: String,
    pub config_hash: String,
    pub optimizer: DualAdam,
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<PathBuf> {
    let run_dir = resolve_run_dir(cfg, out_flag);
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;

    let method = cfg.method()?;
    let env = cfg.env_kind()?;
    if method.is_multitask() {
        bail!(
            "{} is trained through the pretraining phase of a task-inference run; \
             use a TI/BI method or train it via `sweep` on the meta methods",
            method.name()
        );
    }
    let ppo = cfg.ppo();
    let budget = cfg.budget()?;
    let opts = SessionOptions {
        hyper_init: cfg.hyper_init_kind()?,
        probe: cfg.probe_latent_grad,
        combined: cfg.combined()?,
        keep_last_batch: cfg.dump_trajectories,
    };

    let pretrain_log = run_dir.join("pretrain.jsonl");
    let mut session = TrainSession::new(
        method,
        env,
        &cfg.sizes(),
        &ppo,
        &budget,
        cfg.seed,
        opts,
        |update, mean_return| {
            let _ = append_jsonl(
                &pretrain_log,
                &serde_json::json!({ "update": update, "mean_return": mean_return }),
            );
        },
    )?;

    // Resume: restore parameters, optimizer state, and counters. The
    // pretraining phase was re-derived deterministically above, so the frame
    // counter continues without double counting.
    if let Some(resume) = &cfg.resume_from {
        let state: CheckpointState = serde_json::from_str(
            &fs::read_to_string(resume).with_context(|| format!("reading {resume}"))?,
        )?;
        if state.config_hash != cfg.hash()? {
            bail!("checkpoint config hash does not match this configuration");
        }
        let stem = Path::new(resume)
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&state.params_stem);
        let params = load_params(&stem)?;
        session.restore(params, state.optimizer, state.update_index, state.frames)?;
        println!(
            "resumed at update {} ({} frames consumed)",
            state.update_index, state.frames
        );
    }

    let run_id = run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let log_path = run_dir.join("log.jsonl");
    let mut records: Vec<RunRecord> = Vec::new();
    while let Some(record) = session.step()? {
        append_jsonl(&log_path, &record)?;
        let update = record.update;
        records.push(record);
        let at_end = session.finished();
        if cfg.checkpoint_every > 0 && ((update + 1) % cfg.checkpoint_every == 0 || at_end) {
            write_checkpoint(&run_dir, &run_id, cfg, &session, update)?;
            if cfg.dump_trajectories {
                dump_first_env_trajectory(&run_dir, &session)?;
            }
        }
    }

    let summary = serde_json::json!({
        "run_id": run_id,
        "method": method.name(),
        "env": env.name(),
        "seed": cfg.seed,
        "frames": session.frames(),
        "pretrain_frames": session.pretrain_frames(),
        "meta_updates": session.meta_updates(),
        "final_return": selection_score(&records, 0.1),
    });
    fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "finished {} on {} ({} frames): final return {:.3} -> {}",
        method.name(),
        env.name(),
        session.frames(),
        selection_score(&records, 0.1),
        run_dir.display()
    );
    Ok(run_dir)
}

fn write_checkpoint(
    run_dir: &Path,
    run_id: &str,
    cfg: &RunConfig,
    session: &TrainSession,
    update: u64,
) -> Result<()> {
    let stem_name = format!("ckpt-{update}");
    let stem = run_dir.join("checkpoints").join(&stem_name);
    save_params(&stem, &session.agent().params)?;
    let state = CheckpointState {
        run_id: run_id.to_string(),
        update_index: update + 1,
        frames: session.frames(),
        params_stem: stem_name.clone(),
        config_hash: cfg.hash()?,
        optimizer: session.optimizer().clone(),
    };
    fs::write(stem.with_extension("state.json"), serde_json::to_string(&state)?)?;
    Ok(())
}

fn dump_first_env_trajectory(run_dir: &Path, session: &TrainSession) -> Result<()> {
    let Some(batch) = &session.last_batch else { return Ok(()) };
    let path = run_dir.join("trajectories.jsonl");
    let horizon = batch.horizon();
    let mut episode_index = 0usize;
    let mut step_in_episode = 0usize;
    for t in 0..horizon {
        let next_state = if t + 1 < horizon {
            batch.obs[t + 1].row(0).to_vec()
        } else {
            batch.final_obs[0].clone()
        };
        let tr = Transition {
            episode_index,
            step: step_in_episode,
            state: batch.obs[t].row(0).to_vec(),
            action: batch.actions[t][0],
            reward: batch.rewards[t][0],
            next_state,
            done: batch.dones[t][0],
        };
        append_jsonl(&path, &tr)?;
        step_in_episode += 1;
        if batch.dones[t][0] {
            episode_index += 1;
            step_in_episode = 0;
        }
    }
    Ok(())
}

/// Short probing run: trains with the latent-gradient probe enabled and
/// reports the measured norms, starting with the at-initialization value.
pub fn cmd_grad_probe(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<()> {
    let mut probed = cfg.clone();
    probed.probe_latent_grad = true;
    let run_dir = cmd_train(&probed, out_flag)?;
    let log = fs::read_to_string(run_dir.join("log.jsonl"))?;
    let records: Vec<RunRecord> =
        log.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
    let first = records.first().and_then(|r| r.latent_grad_norm);
    let last = records.last().and_then(|r| r.latent_grad_norm);
    match (first, last) {
        (Some(a), Some(b)) => {
            println!("latent gradient norm: {a:.6e} at the first update, {b:.6e} at the last")
        }
        _ => println!("no probe values recorded"),
    }
    Ok(())
}

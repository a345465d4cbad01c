//! Experiment-level statistics and probes: learning-rate sweeps with
//! per-method best selection, bootstrap confidence intervals, and curve
//! smoothing. The latent-gradient-norm probe itself lives in the trainer
//! (it reads gradients mid-update); this module aggregates its records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{EnvDims, MetaAgent, Method, MultiTaskAgent, NetSizes};
use crate::envs::EnvKind;
use crate::rng::{stream, Stream};
use crate::trainer::{
    collect_rollouts, lr_schedule, ppo_update, pretrain_multitask, DualAdam, PpoConfig,
    PretrainBudget, RolloutActor, TrainError, UpdateContext, VecEnvs,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("bootstrap_ci needs at least one value")]
    EmptyInput,
    #[error("bootstrap_ci needs at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("smoothing window {window} exceeds series length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("smoothing window must be at least 1")]
    ZeroWindow,
    #[error("sweep produced no usable cells")]
    AllCellsFailed,
}

/// One line of the per-update training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub update: u64,
    pub frames: u64,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub j_infer: Option<f64>,
    pub j_prior: Option<f64>,
    pub latent_grad_norm: Option<f64>,
}

/// Percentile bootstrap interval of the mean at the given level.
/// Deterministic given the seed.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if resamples < 1000 {
        return Err(AnalysisError::TooFewResamples(resamples));
    }
    let n = values.len();
    let mut rng = stream(seed, Stream::Bootstrap, &[n as u64]);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rand::Rng::gen_range(&mut rng, 0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        means[idx.min(resamples - 1)]
    };
    Ok((pick(alpha), pick(1.0 - alpha)))
}

/// Moving average with valid padding: output length is `len - window + 1`.
pub fn smooth_curve(values: &[f64], window: usize) -> Result<Vec<f64>, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::ZeroWindow);
    }
    if window > values.len() {
        return Err(AnalysisError::WindowTooLarge { window, len: values.len() });
    }
    Ok(values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect())
}

/// One sweep cell: a (learning rate, seed) training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum CellOutcome {
    Finished { lr: f64, seed: u64, records: Vec<RunRecord> },
    Failed { lr: f64, seed: u64, reason: String },
}

/// Aggregated curve point with its bootstrap band.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggPoint {
    pub frames: u64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: String,
    pub env: String,
    pub cells: Vec<CellOutcome>,
    pub best_lr: f64,
    /// Mean curve of the winning learning rate across seeds, with a 68%
    /// bootstrap band per point.
    pub aggregated: Vec<AggPoint>,
}

/// Full specification of one sweep.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub method: Method,
    pub env: EnvKind,
    pub sizes: NetSizes,
    pub cfg: PpoConfig,
    pub budget: PretrainBudget,
    pub seeds: Vec<u64>,
    pub lrs: Vec<f64>,
    pub ci_level: f64,
    pub resamples: usize,
    /// Fraction of final updates entering the selection metric.
    pub selection_tail: f64,
    pub probe: bool,
}

/// Everything one training run needs, set up in one place. The session is
/// deterministic in its seed: resuming a checkpointed session replays the
/// same per-update streams an uninterrupted run would have drawn.
pub struct TrainSession {
    pub method: Method,
    pub env: EnvKind,
    cfg: PpoConfig,
    agent: MetaAgent,
    opt: DualAdam,
    envs: VecEnvs,
    artifacts: Option<crate::agents::MultiTaskArtifacts>,
    combined: Option<(f64, crate::trainer::CombinedSpec)>,
    seed: u64,
    probe: bool,
    pretrain_frames: u64,
    frames: u64,
    update_idx: u64,
    meta_updates: u64,
    /// The most recent rollout, kept for trajectory dumps.
    pub last_batch: Option<crate::trainer::RolloutBatch>,
}

/// Options beyond the PPO config for building a session.
#[derive(Clone, Debug)]
pub struct SessionOptions {
    pub hyper_init: crate::agents::HyperInit,
    pub probe: bool,
    pub combined: Option<(f64, crate::trainer::CombinedSpec)>,
    /// Callback target for pretraining progress (update, mean return).
    pub keep_last_batch: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            hyper_init: crate::agents::HyperInit::BiasHyper,
            probe: false,
            combined: None,
            keep_last_batch: false,
        }
    }
}

impl TrainSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: Method,
        env: EnvKind,
        sizes: &NetSizes,
        cfg: &PpoConfig,
        budget: &PretrainBudget,
        seed: u64,
        opts: SessionOptions,
        mut on_pretrain: impl FnMut(u64, f64),
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let dims = EnvDims::of(env);
        let per_update = cfg.frames_per_update(env);
        let needs_artifacts = method.needs_pretraining()
            || matches!(
                opts.combined,
                Some((_, crate::trainer::CombinedSpec::Learned | crate::trainer::CombinedSpec::BaseNet))
            );
        let pretrain_updates = if needs_artifacts { budget.multitask_updates } else { 0 };
        let effective = PretrainBudget { multitask_updates: pretrain_updates, ..*budget };
        let (pre_frames, meta_frames) = effective.split(cfg, env)?;
        let meta_updates = meta_frames / per_update;

        let mut rng = stream(seed, Stream::Init, &[0]);
        let mut agent = MetaAgent::with_init(method, sizes.clone(), dims, opts.hyper_init, &mut rng)?;

        let artifacts = if needs_artifacts {
            if pretrain_updates == 0 && agent.config.multi_phase_reuse {
                return Err(TrainError::Config(format!(
                    "{} needs a non-zero pretraining budget (the ++ additions draw on the multi-task buffer)",
                    method.name()
                )));
            }
            let mut mt_rng = stream(seed, Stream::Init, &[1]);
            let mt = MultiTaskAgent::for_meta(&agent, &mut mt_rng)?;
            let mut envs = VecEnvs::new(env, cfg.n_envs, seed, 0);
            let artifacts = pretrain_multitask(mt, &mut envs, cfg, pretrain_updates, seed, |u, ret, _| {
                on_pretrain(u, ret)
            })?;
            if agent.config.multi_phase_reuse {
                crate::agents::reuse_initialize(&mut agent, &artifacts)?;
            }
            Some(artifacts)
        } else {
            None
        };
        debug_assert_eq!(artifacts.as_ref().map_or(0, |a| a.frames_consumed), pre_frames);

        Ok(TrainSession {
            method,
            env,
            cfg: cfg.clone(),
            envs: VecEnvs::new(env, cfg.n_envs, seed, 1),
            agent,
            opt: DualAdam::default(),
            artifacts,
            combined: opts.combined,
            seed,
            probe: opts.probe,
            pretrain_frames: pre_frames,
            frames: pre_frames,
            update_idx: 0,
            meta_updates,
            last_batch: None,
        })
    }

    pub fn agent(&self) -> &MetaAgent {
        &self.agent
    }

    pub fn optimizer(&self) -> &DualAdam {
        &self.opt
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn pretrain_frames(&self) -> u64 {
        self.pretrain_frames
    }

    pub fn update_index(&self) -> u64 {
        self.update_idx
    }

    pub fn meta_updates(&self) -> u64 {
        self.meta_updates
    }

    pub fn finished(&self) -> bool {
        self.update_idx >= self.meta_updates
    }

    /// Restore counters, parameters, and optimizer state from a checkpoint.
    pub fn restore(
        &mut self,
        params: crate::diffcore::ParamSet,
        opt: DualAdam,
        update_idx: u64,
        frames: u64,
    ) -> Result<(), TrainError> {
        for (name, tensor) in params.iter() {
            self.agent
                .params
                .set(name, tensor.clone())
                .map_err(|e| TrainError::Config(format!("checkpoint mismatch: {e}")))?;
        }
        self.opt = opt;
        self.update_idx = update_idx;
        self.frames = frames;
        Ok(())
    }

    /// Run one PPO update. Returns the record, or `None` when the frame
    /// budget is exhausted.
    pub fn step(&mut self) -> Result<Option<RunRecord>, TrainError> {
        if self.finished() {
            return Ok(None);
        }
        let u = self.update_idx;
        let batch =
            collect_rollouts(&RolloutActor::Meta(&self.agent), &mut self.envs, &self.cfg, u)?;
        self.frames += batch.frames;
        let ctx = UpdateContext {
            cfg: &self.cfg,
            policy_lr: lr_schedule(&self.cfg, u, self.meta_updates),
            seed: self.seed,
            phase: 1,
            update_idx: u,
            probe: self.probe,
            artifacts: self.artifacts.as_ref(),
        };
        let report = match self.combined {
            Some((w, spec)) => crate::trainer::combined_objective_step(
                &mut self.agent,
                &mut self.opt,
                &batch,
                &ctx,
                w,
                &spec,
            )?,
            None => ppo_update(&mut self.agent, &mut self.opt, &batch, &ctx)?,
        };
        let record = RunRecord {
            update: u,
            frames: self.frames,
            mean_return: batch.mean_meta_return,
            policy_loss: report.policy_loss,
            value_loss: report.value_loss,
            entropy: report.entropy,
            j_infer: report.j_infer,
            j_prior: report.j_prior,
            latent_grad_norm: report.latent_grad_norm,
        };
        self.last_batch = Some(batch);
        self.update_idx += 1;
        Ok(Some(record))
    }
}

/// Train one cell to completion. This is the single-run workhorse the sweep
/// and the CLI train command both use.
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    method: Method,
    env: EnvKind,
    sizes: &NetSizes,
    cfg: &PpoConfig,
    budget: &PretrainBudget,
    seed: u64,
    lr: f64,
    probe: bool,
    mut on_record: impl FnMut(&RunRecord),
) -> Result<Vec<RunRecord>, TrainError> {
    let cfg = PpoConfig { policy_lr: lr, ..cfg.clone() };
    let opts = SessionOptions { probe, ..SessionOptions::default() };
    let mut session = TrainSession::new(method, env, sizes, &cfg, budget, seed, opts, |_, _| {})?;
    let mut records = Vec::with_capacity(session.meta_updates() as usize);
    while let Some(record) = session.step()? {
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}

/// Selection metric: mean return over the final `tail` fraction of updates.
pub fn selection_score(records: &[RunRecord], tail: f64) -> f64 {
    if records.is_empty() {
        return f64::NEG_INFINITY;
    }
    let keep = ((records.len() as f64 * tail).ceil() as usize).clamp(1, records.len());
    let slice = &records[records.len() - keep..];
    slice.iter().map(|r| r.mean_return).sum::<f64>() / keep as f64
}

/// Run every (lr, seed) cell, select the best learning rate by the final
/// aggregated return (ties toward the larger rate), and aggregate the
/// winner's seed curves with a bootstrap band. Crashed cells are marked
/// failed and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, workers: usize) -> Result<SweepResult, AnalysisError> {
    let jobs: Vec<(f64, u64)> = spec
        .lrs
        .iter()
        .flat_map(|&lr| spec.seeds.iter().map(move |&s| (lr, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let cells: Vec<CellOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(lr, seed)| {
                match train_run(
                    spec.method,
                    spec.env,
                    &spec.sizes,
                    &spec.cfg,
                    &spec.budget,
                    seed,
                    lr,
                    spec.probe,
                    |_| {},
                ) {
                    Ok(records) => CellOutcome::Finished { lr, seed, records },
                    Err(e) => CellOutcome::Failed { lr, seed, reason: e.to_string() },
                }
            })
            .collect()
    });

    select_and_aggregate(spec, cells)
}

/// Pure selection + aggregation over recorded curves; re-running this on
/// saved logs reproduces the choice.
pub fn select_and_aggregate(
    spec: &SweepSpec,
    cells: Vec<CellOutcome>,
) -> Result<SweepResult, AnalysisError> {
    let mut best: Option<(f64, f64)> = None; // (score, lr)
    for &lr in &spec.lrs {
        let scores: Vec<f64> = cells
            .iter()
            .filter_map(|c| match c {
                CellOutcome::Finished { lr: l, records, .. } if *l == lr => {
                    Some(selection_score(records, spec.selection_tail))
                }
                _ => None,
            })
            .collect();
        if scores.is_empty() {
            continue;
        }
        let score = scores.iter().sum::<f64>() / scores.len() as f64;
        let better = match best {
            None => true,
            // Ties break toward the larger learning rate.
            Some((s, l)) => score > s || (score == s && lr > l),
        };
        if better {
            best = Some((score, lr));
        }
    }
    let (_, best_lr) = best.ok_or(AnalysisError::AllCellsFailed)?;

    let winner_curves: Vec<&Vec<RunRecord>> = cells
        .iter()
        .filter_map(|c| match c {
            CellOutcome::Finished { lr, records, .. } if *lr == best_lr => Some(records),
            _ => None,
        })
        .collect();
    let min_len = winner_curves.iter().map(|c| c.len()).min().unwrap_or(0);
    let mut aggregated = Vec::with_capacity(min_len);
    for i in 0..min_len {
        let values: Vec<f64> = winner_curves.iter().map(|c| c[i].mean_return).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let (lo, hi) = bootstrap_ci(&values, spec.ci_level, spec.resamples, i as u64)?;
        aggregated.push(AggPoint { frames: winner_curves[0][i].frames, mean, lo, hi });
    }
    Ok(SweepResult {
        method: spec.method.name().to_string(),
        env: spec.env.name().to_string(),
        cells,
        best_lr,
        aggregated,
    })
}

use rand::seq::SliceRandom;

use crate::agents::{
    inference_batch_source, ArchivedMetaEpisode, CombinedTarget, InferTargets, InferenceTarget,
    MetaAgent, MultiTaskAgent, MultiTaskArtifacts, UnrollInputs,
};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::nets::BoundParams;
use crate::rng::{stream, Stream};

use super::adam::{Adam, DualAdam};
use super::gae::{compute_gae, normalize_advantages};
use super::rollout::{collect_rollouts, RolloutActor, RolloutBatch, VecEnvs};
use super::{LossReport, PpoConfig, TrainError};

/// Scale a named gradient subset so its global L2 norm stays within
/// `max_norm`.
fn clip_grad_norm(grads: &mut crate::diffcore::ParamSet, names: &[String], max_norm: f64) {
    let mut sq = 0.0;
    for name in names {
        if let Some(g) = grads.get(name) {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for name in names {
            if let Some(g) = grads.get_mut(name) {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

/// Rows of a step-major tensor restricted to an env subset.
fn rows_subset(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("uniform rows")
}

fn subset_usize(v: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| v[i]).collect()
}

fn column_subset(v: &[f64], idx: &[usize]) -> Tensor {
    Tensor::column(&idx.iter().map(|&i| v[i]).collect::<Vec<_>>())
}

/// Per-(t, env) advantages and returns for one batch, normalized together.
fn advantages_and_returns(
    batch: &RolloutBatch,
    cfg: &PpoConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t_len = batch.horizon();
    let b = batch.n_envs();
    let mut adv = vec![vec![0.0; b]; t_len];
    let mut ret = vec![vec![0.0; b]; t_len];
    for e in 0..b {
        let rewards: Vec<f64> = (0..t_len).map(|t| batch.rewards[t][e]).collect();
        let values: Vec<f64> = (0..t_len).map(|t| batch.values[t][e]).collect();
        let meta_dones: Vec<bool> = (0..t_len).map(|t| batch.meta_dones[t][e]).collect();
        let (a, r) = compute_gae(&rewards, &values, 0.0, &meta_dones, cfg.gamma, cfg.gae_lambda);
        for t in 0..t_len {
            adv[t][e] = a[t];
            ret[t][e] = r[t];
        }
    }
    let mut flat: Vec<f64> = adv.iter().flatten().copied().collect();
    normalize_advantages(&mut flat);
    for t in 0..t_len {
        adv[t].copy_from_slice(&flat[t * b..(t + 1) * b]);
    }
    (adv, ret)
}

/// Slice one meta-episode's unroll inputs for an env subset, with fresh
/// bottleneck noise when the agent carries one.
#[allow(clippy::too_many_arguments)]
fn unroll_inputs_for(
    agent: &MetaAgent,
    batch: &RolloutBatch,
    idx: &[usize],
    seed: u64,
    phase: u64,
    update_idx: u64,
    epoch: usize,
    mb: usize,
) -> UnrollInputs {
    let t_len = batch.horizon();
    let noise = if agent.config.target != InferenceTarget::None {
        let mut rng = stream(
            seed,
            Stream::Noise,
            &[phase, update_idx, epoch as u64, mb as u64],
        );
        Some(
            (0..t_len)
                .map(|_| {
                    Tensor::new(
                        vec![idx.len(), agent.latent_dim()],
                        (0..idx.len() * agent.latent_dim())
                            .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
                            .collect(),
                    )
                    .expect("noise shape")
                })
                .collect(),
        )
    } else {
        None
    };
    UnrollInputs {
        obs: batch.obs.iter().map(|t| rows_subset(t, idx)).collect(),
        prev_act: batch.prev_act.iter().map(|t| rows_subset(t, idx)).collect(),
        prev_rew: batch.prev_rew.iter().map(|t| rows_subset(t, idx)).collect(),
        done: batch.done_flags.iter().map(|t| rows_subset(t, idx)).collect(),
        noise,
    }
}

/// Unroll inputs for one archived pretraining meta-episode.
fn unroll_inputs_for_archive(
    agent: &MetaAgent,
    episodes: &[&ArchivedMetaEpisode],
    noise_rng: &mut rand_chacha::ChaCha8Rng,
    n_actions: usize,
) -> UnrollInputs {
    let t_len = episodes[0].obs.len();
    let b = episodes.len();
    let mut obs = Vec::with_capacity(t_len);
    let mut prev_act = Vec::with_capacity(t_len);
    let mut prev_rew = Vec::with_capacity(t_len);
    let mut done = Vec::with_capacity(t_len);
    for t in 0..t_len {
        obs.push(
            Tensor::from_rows(&episodes.iter().map(|e| e.obs[t].clone()).collect::<Vec<_>>())
                .expect("obs rows"),
        );
        let mut pa = Tensor::zeros(b, n_actions);
        let mut pr = vec![0.0; b];
        let mut df = vec![0.0; b];
        for (r, e) in episodes.iter().enumerate() {
            if t == 0 {
                df[r] = 1.0;
            } else {
                pa.data_mut()[r * n_actions + e.actions[t - 1]] = 1.0;
                pr[r] = e.rewards[t - 1];
                df[r] = f64::from(u8::from(e.dones[t - 1]));
            }
        }
        prev_act.push(pa);
        prev_rew.push(Tensor::column(&pr));
        done.push(Tensor::column(&df));
    }
    let noise = (0..t_len)
        .map(|_| {
            Tensor::new(
                vec![b, agent.latent_dim()],
                (0..b * agent.latent_dim())
                    .map(|_| rand::Rng::sample(noise_rng, rand_distr::StandardNormal))
                    .collect(),
            )
            .expect("noise shape")
        })
        .collect();
    UnrollInputs { obs, prev_act, prev_rew, done, noise: Some(noise) }
}

/// Build the VI reconstruction stacks for an env subset: row `i * B + b`
/// holds transition `i` of subset env `b`.
fn vi_stacks(batch: &RolloutBatch, idx: &[usize], n_actions: usize) -> (Tensor, Tensor, Tensor) {
    let t_len = batch.horizon();
    let b = idx.len();
    let mut obs_rows = Vec::with_capacity(t_len * b);
    let mut act_rows = Vec::with_capacity(t_len * b);
    let mut tgt_rows = Vec::with_capacity(t_len * b);
    for i in 0..t_len {
        for &e in idx {
            obs_rows.push(batch.obs[i].row(e).to_vec());
            let mut onehot = vec![0.0; n_actions];
            onehot[batch.actions[i][e]] = 1.0;
            act_rows.push(onehot);
            let mut tgt = if i + 1 < t_len {
                batch.obs[i + 1].row(e).to_vec()
            } else {
                batch.final_obs[e].clone()
            };
            tgt.push(batch.rewards[i][e]);
            tgt_rows.push(tgt);
        }
    }
    (
        Tensor::from_rows(&obs_rows).expect("obs stack"),
        Tensor::from_rows(&act_rows).expect("act stack"),
        Tensor::from_rows(&tgt_rows).expect("target stack"),
    )
}

pub(super) struct MiniBatchLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub j_infer: Option<f64>,
    pub j_prior: Option<f64>,
    pub probe: Option<f64>,
}

/// Context shared by the update functions.
pub struct UpdateContext<'a> {
    pub cfg: &'a PpoConfig,
    /// Scheduled policy learning rate for this update.
    pub policy_lr: f64,
    pub seed: u64,
    pub phase: u64,
    pub update_idx: u64,
    /// Measure the latent-gradient probe on the first minibatch.
    pub probe: bool,
    pub artifacts: Option<&'a MultiTaskArtifacts>,
}

/// One PPO update over a collected batch: clipped surrogate + value +
/// entropy stepped by the policy optimizer; inference objectives stepped by
/// the separate inference optimizer at its fixed rate. Recurrent nets unroll
/// over whole meta-episodes.
pub fn ppo_update(
    agent: &mut MetaAgent,
    opt: &mut DualAdam,
    batch: &RolloutBatch,
    ctx: &UpdateContext<'_>,
) -> Result<LossReport, TrainError> {
    run_update(agent, opt, batch, ctx, None)
}

/// Combined-objective mode for end-to-end (RNN-architecture) variants: a
/// single optimizer steps `(1 - w) * RL + w * inference`; no bottleneck, no
/// projection layer. `w = 0` short-circuits to exactly the plain update;
/// `w = 1` drops the policy terms entirely.
pub fn combined_objective_step(
    agent: &mut MetaAgent,
    opt: &mut DualAdam,
    batch: &RolloutBatch,
    ctx: &UpdateContext<'_>,
    weight: f64,
    target: &CombinedSpec,
) -> Result<LossReport, TrainError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(TrainError::Config(format!(
            "combined-objective weight must lie in [0, 1], got {weight}"
        )));
    }
    if agent.config.target != InferenceTarget::None {
        return Err(TrainError::Config(
            "combined objective requires an end-to-end (RNN architecture) method".into(),
        ));
    }
    run_update(agent, opt, batch, ctx, Some((weight, target)))
}

/// Which label the combined objective regresses onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombinedSpec {
    Given,
    Learned,
    BaseNet,
}

fn run_update(
    agent: &mut MetaAgent,
    opt: &mut DualAdam,
    batch: &RolloutBatch,
    ctx: &UpdateContext<'_>,
    combined: Option<(f64, &CombinedSpec)>,
) -> Result<LossReport, TrainError> {
    let cfg = ctx.cfg;
    let (adv, ret) = advantages_and_returns(batch, cfg);
    let b = batch.n_envs();
    let t_len = batch.horizon();
    let n_actions = batch.prev_act[0].cols();

    let mut report = LossReport::default();
    let mut minibatch_count = 0.0;
    let mut probe_value = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..b).collect();
        let mut shuffle_rng = stream(
            ctx.seed,
            Stream::Shuffle,
            &[ctx.phase, ctx.update_idx, epoch as u64],
        );
        order.shuffle(&mut shuffle_rng);
        let mb_size = b / cfg.minibatches.max(1);
        for mb in 0..cfg.minibatches.max(1) {
            let idx: Vec<usize> = if mb + 1 == cfg.minibatches.max(1) {
                order[mb * mb_size..].to_vec()
            } else {
                order[mb * mb_size..(mb + 1) * mb_size].to_vec()
            };
            if idx.is_empty() {
                continue;
            }
            let losses = minibatch_step(
                agent,
                opt,
                batch,
                ctx,
                combined,
                &idx,
                &adv,
                &ret,
                epoch,
                mb,
                t_len,
                n_actions,
                ctx.probe && epoch == 0 && mb == 0,
            )?;
            report.policy_loss += losses.policy;
            report.value_loss += losses.value;
            report.entropy += losses.entropy;
            if let Some(j) = losses.j_infer {
                *report.j_infer.get_or_insert(0.0) += j;
            }
            if let Some(j) = losses.j_prior {
                *report.j_prior.get_or_insert(0.0) += j;
            }
            if losses.probe.is_some() {
                probe_value = losses.probe;
            }
            minibatch_count += 1.0;
        }
    }
    report.policy_loss /= minibatch_count;
    report.value_loss /= minibatch_count;
    report.entropy /= minibatch_count;
    if let Some(j) = report.j_infer.as_mut() {
        *j /= minibatch_count;
    }
    if let Some(j) = report.j_prior.as_mut() {
        *j /= minibatch_count;
    }
    report.latent_grad_norm = probe_value;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn minibatch_step(
    agent: &mut MetaAgent,
    opt: &mut DualAdam,
    batch: &RolloutBatch,
    ctx: &UpdateContext<'_>,
    combined: Option<(f64, &CombinedSpec)>,
    idx: &[usize],
    adv: &[Vec<f64>],
    ret: &[Vec<f64>],
    epoch: usize,
    mb: usize,
    t_len: usize,
    n_actions: usize,
    probe: bool,
) -> Result<MiniBatchLosses, TrainError> {
    let cfg = ctx.cfg;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &agent.params)?;
    let inputs = unroll_inputs_for(agent, batch, idx, ctx.seed, ctx.phase, ctx.update_idx, epoch, mb);
    let nodes = agent.unroll(&mut g, &bound, &inputs)?;

    let actions: Vec<Vec<usize>> =
        (0..t_len).map(|t| subset_usize(&batch.actions[t], idx)).collect();
    let old_logp: Vec<Tensor> =
        (0..t_len).map(|t| rows_subset(&batch.old_logp[t], idx)).collect();
    let adv_t: Vec<Tensor> = (0..t_len).map(|t| column_subset(&adv[t], idx)).collect();
    let ret_t: Vec<Tensor> = (0..t_len).map(|t| column_subset(&ret[t], idx)).collect();

    let skip_rl = matches!(combined, Some((w, _)) if w == 1.0);
    let rl = if skip_rl {
        None
    } else {
        Some(agent.rl_loss(
            &mut g,
            &nodes,
            &actions,
            &old_logp,
            &adv_t,
            &ret_t,
            cfg.clip_ratio,
            cfg.value_coef,
            cfg.entropy_coef,
        )?)
    };

    // Latent-gradient probe: backward from the policy term alone, before the
    // training backward, so the measurement never perturbs the update.
    let mut probe_value = None;
    if probe {
        if let Some(rl) = &rl {
            g.backward(rl.policy)?;
            let mut acc = 0.0;
            let mut count = 0usize;
            for &p in &nodes.probes {
                let width = g.value(p).cols();
                let rows = g.value(p).rows();
                if let Some(grad) = g.node_grad(p) {
                    for r in 0..rows {
                        let sq: f64 =
                            grad[r * width..(r + 1) * width].iter().map(|v| v * v).sum();
                        acc += sq.sqrt();
                    }
                }
                count += rows;
            }
            probe_value = Some(acc / count.max(1) as f64);
        }
    }

    // Task-inference objectives.
    let subset_labels = subset_usize(&batch.task_indices, idx);
    let mut j_infer_node: Option<NodeId> = None;
    let mut j_prior_node: Option<NodeId> = None;
    match combined {
        Some((w, spec)) if w > 0.0 => {
            let target = match spec {
                CombinedSpec::Given => CombinedTarget::Given { labels: &subset_labels },
                CombinedSpec::Learned => {
                    let artifacts = ctx.artifacts.ok_or_else(|| {
                        TrainError::Config("learned combined target needs pretraining artifacts".into())
                    })?;
                    CombinedTarget::Learned { g_rows: artifacts.agent.g_rows(&subset_labels)? }
                }
                CombinedSpec::BaseNet => {
                    let artifacts = ctx.artifacts.ok_or_else(|| {
                        TrainError::Config("base-net combined target needs pretraining artifacts".into())
                    })?;
                    CombinedTarget::BaseNet {
                        phi_rows: artifacts.agent.generated_base_rows(&subset_labels)?,
                    }
                }
            };
            j_infer_node = Some(agent.combined_infer_loss(&mut g, &nodes, &target)?);
        }
        Some(_) => {}
        None => match agent.config.target {
            InferenceTarget::None => {}
            InferenceTarget::Given => {
                j_infer_node = Some(agent.infer_loss(
                    &mut g,
                    &bound,
                    &nodes,
                    &InferTargets::Given { labels: &subset_labels },
                )?);
                j_prior_node = Some(agent.prior_loss(&mut g, &nodes)?);
            }
            InferenceTarget::Transitions => {
                let (obs_stack, act_stack, target_stack) = vi_stacks(batch, idx, n_actions);
                j_infer_node = Some(agent.infer_loss(
                    &mut g,
                    &bound,
                    &nodes,
                    &InferTargets::Transitions {
                        obs_stack: &obs_stack,
                        act_stack: &act_stack,
                        target_stack: &target_stack,
                    },
                )?);
                j_prior_node = Some(agent.prior_loss(&mut g, &nodes)?);
            }
            InferenceTarget::Learned | InferenceTarget::BaseNet => {
                let artifacts = ctx.artifacts.ok_or_else(|| {
                    TrainError::Config(format!(
                        "{} needs multi-task pretraining artifacts",
                        agent.method.name()
                    ))
                })?;
                let (infer, prior) = learned_inference_losses(
                    agent,
                    &mut g,
                    &bound,
                    batch,
                    &nodes,
                    idx,
                    artifacts,
                    ctx,
                    epoch,
                    mb,
                    n_actions,
                )?;
                j_infer_node = Some(infer);
                j_prior_node = Some(prior);
            }
        },
    }

    // Assemble the total loss. The parameter partition keeps the two
    // optimizers independent: RL gradients stop at the bottleneck, inference
    // gradients never reach the policy path.
    let mut total = match (&rl, combined) {
        (Some(rl), Some((w, _))) if w > 0.0 => g.scale(rl.total, 1.0 - w)?,
        (Some(rl), _) => rl.total,
        (None, _) => g.scalar(0.0)?,
    };
    if let Some(ji) = j_infer_node {
        let weighted = match combined {
            Some((w, _)) => g.scale(ji, w)?,
            None => ji,
        };
        total = g.add(total, weighted)?;
    }
    if let Some(jp) = j_prior_node {
        let weighted = g.scale(jp, cfg.prior_weight)?;
        total = g.add(total, weighted)?;
    }

    let mut grads = g.backward(total).map_err(|source| TrainError::Diverged {
        update: ctx.update_idx,
        detail: source.to_string(),
    })?;

    let policy_names: Vec<String> = agent.policy_param_names().to_vec();
    let inference_names: Vec<String> = agent.inference_param_names().to_vec();
    if let Some(max_norm) = cfg.max_grad_norm {
        clip_grad_norm(&mut grads, &policy_names, max_norm);
        clip_grad_norm(&mut grads, &inference_names, max_norm);
    }
    opt.policy.step(&mut agent.params, &grads, &policy_names, ctx.policy_lr)?;
    if !inference_names.is_empty() {
        opt.inference.step(&mut agent.params, &grads, &inference_names, cfg.inference_lr)?;
    }

    Ok(MiniBatchLosses {
        policy: rl.as_ref().map_or(0.0, |r| g.value(r.policy).item()),
        value: rl.as_ref().map_or(0.0, |r| g.value(r.value).item()),
        entropy: rl.as_ref().map_or(0.0, |r| g.value(r.entropy).item()),
        j_infer: j_infer_node.map(|n| g.value(n).item()),
        j_prior: j_prior_node.map(|n| g.value(n).item()),
        probe: probe_value,
    })
}

/// J_infer for the learned-embedding and base-net targets, with the "++"
/// union sampling over the meta batch and the pretraining archive.
#[allow(clippy::too_many_arguments)]
fn learned_inference_losses(
    agent: &MetaAgent,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &RolloutBatch,
    nodes: &crate::agents::UnrollNodes,
    idx: &[usize],
    artifacts: &MultiTaskArtifacts,
    ctx: &UpdateContext<'_>,
    epoch: usize,
    mb: usize,
    n_actions: usize,
) -> Result<(NodeId, NodeId), TrainError> {
    use crate::agents::InferenceSample;

    let subset_labels = subset_usize(&batch.task_indices, idx);
    let make_target = |labels: &[usize]| -> Result<InferTargets<'static>, TrainError> {
        Ok(match agent.config.target {
            InferenceTarget::Learned => {
                InferTargets::Learned { g_rows: artifacts.agent.g_rows(labels)? }
            }
            InferenceTarget::BaseNet => {
                InferTargets::BaseNet { phi_rows: artifacts.agent.generated_base_rows(labels)? }
            }
            _ => unreachable!("caller dispatches learned targets only"),
        })
    };

    if !agent.config.multi_phase_reuse {
        let target = make_target(&subset_labels)?;
        let infer = agent.infer_loss(g, bound, nodes, &target)?;
        let prior = agent.prior_loss(g, nodes)?;
        return Ok((infer, prior));
    }

    // "++": draw this minibatch's inference episodes uniformly from the
    // union of the current batch and the pretraining archive, then unroll
    // the encoder on the drawn episodes.
    let mut draw_rng = stream(
        ctx.seed,
        Stream::Shuffle,
        &[ctx.phase, ctx.update_idx, epoch as u64, mb as u64, 0x1],
    );
    let samples = inference_batch_source(
        true,
        batch.n_envs(),
        artifacts.buffer.len(),
        idx.len(),
        &mut draw_rng,
    )?;

    // Assemble the drawn episodes as one archive-style unroll batch.
    let t_len = batch.horizon();
    let episodes: Vec<ArchivedMetaEpisode> = samples
        .iter()
        .map(|s| match *s {
            InferenceSample::Meta(e) => ArchivedMetaEpisode {
                obs: (0..t_len).map(|t| batch.obs[t].row(e).to_vec()).collect(),
                actions: (0..t_len).map(|t| batch.actions[t][e]).collect(),
                rewards: (0..t_len).map(|t| batch.rewards[t][e]).collect(),
                dones: (0..t_len).map(|t| batch.dones[t][e]).collect(),
                final_obs: batch.final_obs[e].clone(),
                task_index: batch.task_indices[e],
            },
            InferenceSample::Archive(j) => artifacts.buffer[j].clone(),
        })
        .collect();
    let refs: Vec<&ArchivedMetaEpisode> = episodes.iter().collect();
    let mut noise_rng = stream(
        ctx.seed,
        Stream::Noise,
        &[ctx.phase, ctx.update_idx, epoch as u64, mb as u64, 0x2],
    );
    let inputs = unroll_inputs_for_archive(agent, &refs, &mut noise_rng, n_actions);
    let enc_nodes = agent.unroll(g, bound, &inputs)?;
    let labels: Vec<usize> = episodes.iter().map(|e| e.task_index).collect();
    let target = make_target(&labels)?;
    let infer = agent.infer_loss(g, bound, &enc_nodes, &target)?;
    let prior = agent.prior_loss(g, &enc_nodes)?;
    Ok((infer, prior))
}

/// Train the privileged multi-task policy for exactly `updates` PPO updates,
/// archiving every collected meta-episode for the "++" variants. The frames
/// consumed are deducted from the meta-phase budget by the caller. A budget
/// of zero returns the agent untouched: a random projection g and an empty
/// archive.
pub fn pretrain_multitask(
    mut agent: MultiTaskAgent,
    envs: &mut VecEnvs,
    cfg: &PpoConfig,
    updates: u64,
    seed: u64,
    mut on_update: impl FnMut(u64, f64, &LossReport),
) -> Result<MultiTaskArtifacts, TrainError> {
    let mut opt = Adam::new();
    let names: Vec<String> = agent.params.names().map(String::from).collect();
    let mut buffer = Vec::new();
    let mut frames = 0u64;
    for update_idx in 0..updates {
        let batch = collect_rollouts(&RolloutActor::Multi(&agent), envs, cfg, update_idx)?;
        frames += batch.frames;
        archive_batch(&batch, &mut buffer);
        let report =
            multitask_update(&mut agent, &mut opt, &names, &batch, cfg, seed, update_idx)?;
        on_update(update_idx, batch.mean_meta_return, &report);
    }
    Ok(MultiTaskArtifacts { agent, buffer, frames_consumed: frames, updates })
}

fn archive_batch(batch: &RolloutBatch, buffer: &mut Vec<ArchivedMetaEpisode>) {
    let t_len = batch.horizon();
    for e in 0..batch.n_envs() {
        buffer.push(ArchivedMetaEpisode {
            obs: (0..t_len).map(|t| batch.obs[t].row(e).to_vec()).collect(),
            actions: (0..t_len).map(|t| batch.actions[t][e]).collect(),
            rewards: (0..t_len).map(|t| batch.rewards[t][e]).collect(),
            dones: (0..t_len).map(|t| batch.dones[t][e]).collect(),
            final_obs: batch.final_obs[e].clone(),
            task_index: batch.task_indices[e],
        });
    }
}

/// PPO update for the feed-forward multi-task policy: the whole batch is one
/// stacked forward pass per minibatch.
fn multitask_update(
    agent: &mut MultiTaskAgent,
    opt: &mut Adam,
    names: &[String],
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    seed: u64,
    update_idx: u64,
) -> Result<LossReport, TrainError> {
    let (adv, ret) = advantages_and_returns(batch, cfg);
    let b = batch.n_envs();
    let t_len = batch.horizon();
    let mut report = LossReport::default();
    let mut count = 0.0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..b).collect();
        let mut shuffle_rng =
            stream(seed, Stream::Shuffle, &[2, update_idx, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mb_size = b / cfg.minibatches.max(1);
        for mb in 0..cfg.minibatches.max(1) {
            let idx: Vec<usize> = if mb + 1 == cfg.minibatches.max(1) {
                order[mb * mb_size..].to_vec()
            } else {
                order[mb * mb_size..(mb + 1) * mb_size].to_vec()
            };
            if idx.is_empty() {
                continue;
            }
            // Stack (t, env) rows: row t * |idx| + r.
            let mut obs_rows = Vec::with_capacity(t_len * idx.len());
            let mut tasks = Vec::with_capacity(t_len * idx.len());
            let mut actions = Vec::with_capacity(t_len * idx.len());
            let mut old_logp = Vec::with_capacity(t_len * idx.len());
            let mut adv_rows = Vec::with_capacity(t_len * idx.len());
            let mut ret_rows = Vec::with_capacity(t_len * idx.len());
            for t in 0..t_len {
                for &e in &idx {
                    obs_rows.push(batch.obs[t].row(e).to_vec());
                    tasks.push(batch.task_indices[e]);
                    actions.push(batch.actions[t][e]);
                    old_logp.push(batch.old_logp[t].row(e)[0]);
                    adv_rows.push(adv[t][e]);
                    ret_rows.push(ret[t][e]);
                }
            }
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &agent.params)?;
            let obs_n = g.input(Tensor::from_rows(&obs_rows)?)?;
            let (logits, values) = agent.forward(&mut g, &bound, obs_n, &tasks)?;

            let logp_all = g.row_log_softmax(logits)?;
            let logp = g.gather_col(logp_all, &actions)?;
            let old = g.input(Tensor::column(&old_logp))?;
            let diff = g.sub(logp, old)?;
            let ratio = g.exp(diff)?;
            let adv_n = g.input(Tensor::column(&adv_rows))?;
            let s1 = g.mul(ratio, adv_n)?;
            let clipped = g.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)?;
            let s2 = g.mul(clipped, adv_n)?;
            let surr = g.min_elem(s1, s2)?;
            let surr_mean = g.mean_all(surr)?;
            let policy = g.scale(surr_mean, -1.0)?;

            let ret_n = g.input(Tensor::column(&ret_rows))?;
            let vdiff = g.sub(values, ret_n)?;
            let vsq = g.mul(vdiff, vdiff)?;
            let value = g.mean_all(vsq)?;

            let probs = g.row_softmax(logits)?;
            let plogp = g.mul(probs, logp_all)?;
            let ent_sum = g.sum_all(plogp)?;
            let entropy = g.scale(ent_sum, -1.0 / (t_len * idx.len()) as f64)?;

            let v_term = g.scale(value, cfg.value_coef)?;
            let e_term = g.scale(entropy, -cfg.entropy_coef)?;
            let total = g.add(policy, v_term)?;
            let total = g.add(total, e_term)?;

            let mut grads = g.backward(total).map_err(|source| TrainError::Diverged {
                update: update_idx,
                detail: source.to_string(),
            })?;
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, names, max_norm);
            }
            opt.step(&mut agent.params, &grads, names, cfg.policy_lr)?;

            report.policy_loss += g.value(policy).item();
            report.value_loss += g.value(value).item();
            report.entropy += g.value(entropy).item();
            count += 1.0;
        }
    }
    report.policy_loss /= count;
    report.value_loss /= count;
    report.entropy /= count;
    Ok(report)
}

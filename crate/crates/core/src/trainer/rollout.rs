use rand::Rng;

use crate::agents::{MetaAgent, MultiTaskAgent};
use crate::diffcore::Tensor;
use crate::envs::{sample_task, Env, EnvKind, Task};
use crate::rng::{stream, Stream};

use super::{PpoConfig, TrainError};

/// A batch of independent environment instances with pre-split RNG streams.
/// Environments are stepped in lockstep; episode lengths are fixed per kind,
/// so meta-episode boundaries align across the batch.
pub struct VecEnvs {
    pub kind: EnvKind,
    envs: Vec<Env>,
    tasks: Vec<Task>,
    seed: u64,
    phase: u64,
}

impl VecEnvs {
    pub fn new(kind: EnvKind, n_envs: usize, seed: u64, phase: u64) -> Self {
        let envs = (0..n_envs).map(|_| Env::new(kind)).collect();
        VecEnvs { kind, envs, tasks: Vec::new(), seed, phase }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Sample one fresh task per environment and reset meta-episodes.
    /// Returns the initial observations.
    fn reset_all(&mut self, update_idx: u64) -> Vec<Vec<f64>> {
        self.tasks.clear();
        let mut obs = Vec::with_capacity(self.envs.len());
        for (i, env) in self.envs.iter_mut().enumerate() {
            let mut rng = stream(self.seed, Stream::Task, &[self.phase, i as u64, update_idx]);
            let task = sample_task(self.kind, &mut rng);
            obs.push(env.reset_meta(&task));
            self.tasks.push(task);
        }
        obs
    }
}

/// Whose policy drives the rollout. The meta agent's acting path never sees
/// the task; the multi-task policy is conditioned on it by construction.
pub enum RolloutActor<'a> {
    Meta(&'a MetaAgent),
    Multi(&'a MultiTaskAgent),
}

/// On-policy data for one update: `n_envs` whole meta-episodes, collected in
/// lockstep. Layout is step-major: entry `t` covers all environments.
pub struct RolloutBatch {
    /// Observation each action was taken from.
    pub obs: Vec<Tensor>,
    /// One-hot of the previous action (zeros at meta-episode start).
    pub prev_act: Vec<Tensor>,
    pub prev_rew: Vec<Tensor>,
    /// 1.0 on the first step of each inner episode.
    pub done_flags: Vec<Tensor>,
    pub actions: Vec<Vec<usize>>,
    pub old_logp: Vec<Tensor>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    pub meta_dones: Vec<Vec<bool>>,
    /// Observation after the final step, for transition reconstruction.
    pub final_obs: Vec<Vec<f64>>,
    pub task_indices: Vec<usize>,
    pub mean_meta_return: f64,
    pub frames: u64,
}

impl RolloutBatch {
    pub fn horizon(&self) -> usize {
        self.obs.len()
    }

    pub fn n_envs(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

/// Collect one rollout: every environment runs exactly one meta-episode with
/// a freshly sampled task, recurrent state starting from zeros. Agent
/// parameters are read-only for the duration.
pub fn collect_rollouts(
    actor: &RolloutActor<'_>,
    envs: &mut VecEnvs,
    cfg: &PpoConfig,
    update_idx: u64,
) -> Result<RolloutBatch, TrainError> {
    let kind = envs.kind;
    let horizon = kind.meta_len();
    let b = envs.len();
    let n_actions = kind.action_count();
    if b != cfg.n_envs {
        return Err(TrainError::Config(format!(
            "batch holds {b} envs but the config expects {}",
            cfg.n_envs
        )));
    }

    let mut obs_rows = envs.reset_all(update_idx);
    let tasks: Vec<usize> = envs.tasks.iter().map(Task::label_index).collect();

    let state_width = match actor {
        RolloutActor::Meta(agent) => agent.gru_hidden(),
        RolloutActor::Multi(_) => 1,
    };
    let mut state = Tensor::zeros(b, state_width);
    let mut prev_actions: Vec<Option<usize>> = vec![None; b];
    let mut prev_rewards = vec![0.0; b];
    let mut episode_start = vec![true; b];

    let mut batch = RolloutBatch {
        obs: Vec::with_capacity(horizon),
        prev_act: Vec::with_capacity(horizon),
        prev_rew: Vec::with_capacity(horizon),
        done_flags: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        old_logp: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon),
        dones: Vec::with_capacity(horizon),
        meta_dones: Vec::with_capacity(horizon),
        final_obs: Vec::new(),
        task_indices: tasks.clone(),
        mean_meta_return: 0.0,
        frames: (horizon * b) as u64,
    };

    let mut action_rngs: Vec<_> = (0..b)
        .map(|i| stream(envs.seed, Stream::Action, &[envs.phase, i as u64, update_idx]))
        .collect();

    let mut meta_returns = vec![0.0; b];
    for _t in 0..horizon {
        let obs = Tensor::from_rows(&obs_rows)?;
        let prev_act_rows: Vec<usize> = prev_actions.iter().map(|a| a.unwrap_or(0)).collect();
        let mut prev_act = Tensor::one_hot_rows(&prev_act_rows, n_actions)?;
        for (i, a) in prev_actions.iter().enumerate() {
            if a.is_none() {
                // No previous action at meta-episode start.
                for v in prev_act.data_mut()[i * n_actions..(i + 1) * n_actions].iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let prev_rew = Tensor::column(&prev_rewards);
        let done_flag =
            Tensor::column(&episode_start.iter().map(|&d| f64::from(u8::from(d))).collect::<Vec<_>>());

        let (probs, log_probs, values, next_state) = match actor {
            RolloutActor::Meta(agent) => {
                let out = agent.act(&obs, &prev_act, &prev_rew, &done_flag, &state, None)?;
                (out.probs, out.log_probs, out.values, out.state)
            }
            RolloutActor::Multi(agent) => {
                let (probs, log_probs, values) = agent.act(&obs, &tasks)?;
                (probs, log_probs, values, state.clone())
            }
        };

        // Sample actions from the pre-split per-env streams.
        let mut actions = Vec::with_capacity(b);
        let mut logp_rows = Vec::with_capacity(b);
        for (i, p) in probs.iter().enumerate() {
            let u: f64 = action_rngs[i].gen();
            let mut acc = 0.0;
            let mut chosen = p.len() - 1;
            for (a, &pa) in p.iter().enumerate() {
                acc += pa;
                if u < acc {
                    chosen = a;
                    break;
                }
            }
            actions.push(chosen);
            logp_rows.push(log_probs[i][chosen]);
        }

        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        let mut meta_dones = Vec::with_capacity(b);
        let mut next_obs_rows = Vec::with_capacity(b);
        for (i, env) in envs.envs.iter_mut().enumerate() {
            let r = env.step(actions[i]).map_err(TrainError::Env)?;
            meta_returns[i] += r.reward;
            rewards.push(r.reward);
            dones.push(r.done);
            meta_dones.push(r.meta_done);
            next_obs_rows.push(r.obs);
        }

        batch.obs.push(obs);
        batch.prev_act.push(prev_act);
        batch.prev_rew.push(prev_rew);
        batch.done_flags.push(done_flag);
        batch.old_logp.push(Tensor::column(&logp_rows));
        batch.values.push(values);
        batch.rewards.push(rewards.clone());
        batch.dones.push(dones.clone());
        batch.meta_dones.push(meta_dones);
        batch.actions.push(actions.clone());

        // Recurrent state persists across inner-episode boundaries; the next
        // input marks boundaries with the done flag instead.
        state = next_state;
        for i in 0..b {
            prev_actions[i] = Some(actions[i]);
            prev_rewards[i] = rewards[i];
            episode_start[i] = dones[i];
        }
        obs_rows = next_obs_rows;
    }
    debug_assert!(batch.meta_dones.last().unwrap().iter().all(|&d| d));

    batch.final_obs = obs_rows;
    batch.mean_meta_return = meta_returns.iter().sum::<f64>() / b as f64;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Method, NetSizes};

    fn tiny_meta(kind: EnvKind, method: Method) -> MetaAgent {
        let mut rng = stream(11, Stream::Init, &[]);
        MetaAgent::new(method, NetSizes::tiny(), crate::agents::EnvDims::of(kind), &mut rng)
            .unwrap()
    }

    #[test]
    fn rollout_shape_and_frame_count() {
        let agent = tiny_meta(EnvKind::Grid, Method::Rnn);
        let cfg = PpoConfig { n_envs: 4, ..PpoConfig::default() };
        let mut envs = VecEnvs::new(EnvKind::Grid, 4, 1, 0);
        let batch =
            collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, 0).unwrap();
        assert_eq!(batch.horizon(), 60);
        assert_eq!(batch.n_envs(), 4);
        assert_eq!(batch.frames, 240);
        // 16 envs x 60-step grid meta-episodes give exactly 960 frames.
        assert_eq!(16 * EnvKind::Grid.meta_len(), 960);
    }

    #[test]
    fn same_seed_gives_bit_identical_batches() {
        let agent = tiny_meta(EnvKind::Grid, Method::RnnHn);
        let cfg = PpoConfig { n_envs: 3, ..PpoConfig::default() };
        let run = || {
            let mut envs = VecEnvs::new(EnvKind::Grid, 3, 7, 0);
            collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, 5).unwrap()
        };
        let a = run();
        let b = run();
        for t in 0..a.horizon() {
            assert_eq!(a.actions[t], b.actions[t]);
            assert_eq!(a.rewards[t], b.rewards[t]);
            assert_eq!(a.old_logp[t], b.old_logp[t]);
            assert_eq!(a.values[t], b.values[t]);
        }
        assert_eq!(a.mean_meta_return, b.mean_meta_return);
    }

    #[test]
    fn done_flags_mark_episode_starts_and_state_persists() {
        let agent = tiny_meta(EnvKind::Grid, Method::Rnn);
        let cfg = PpoConfig { n_envs: 2, ..PpoConfig::default() };
        let mut envs = VecEnvs::new(EnvKind::Grid, 2, 3, 0);
        let batch =
            collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, 0).unwrap();
        // t=0 marks the meta start; inner boundaries at t=15,30,45.
        for t in 0..batch.horizon() {
            let want = f64::from(u8::from(t % 15 == 0));
            for b in 0..2 {
                assert_eq!(batch.done_flags[t].row(b)[0], want, "t={t}");
            }
        }
        // Inner done at t=14 but not meta-done.
        assert!(batch.dones[14].iter().all(|&d| d));
        assert!(batch.meta_dones[14].iter().all(|&d| !d));
        assert!(batch.meta_dones[59].iter().all(|&d| d));
    }

    #[test]
    fn multitask_actor_rolls_out() {
        let mut rng = stream(12, Stream::Init, &[]);
        let agent = MultiTaskAgent::new(
            Method::Multi,
            NetSizes::tiny(),
            crate::agents::EnvDims::of(EnvKind::Grid),
            &mut rng,
        )
        .unwrap();
        let cfg = PpoConfig { n_envs: 2, ..PpoConfig::default() };
        let mut envs = VecEnvs::new(EnvKind::Grid, 2, 9, 1);
        let batch =
            collect_rollouts(&RolloutActor::Multi(&agent), &mut envs, &cfg, 0).unwrap();
        assert_eq!(batch.horizon(), 60);
        assert_eq!(batch.task_indices.len(), 2);
    }
}

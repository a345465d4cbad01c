//! PPO outer loop over meta-episodes: vectorized rollout collection, GAE,
//! the clipped surrogate with value and entropy terms, dual-optimizer
//! training (swept policy rate, fixed task-inference rate), pretraining
//! budgeting, the combined-objective mode, and linear learning-rate decay.

mod adam;
mod gae;
mod rollout;
mod update;

pub use adam::{Adam, DualAdam};
pub use gae::{compute_gae, normalize_advantages};
pub use rollout::{collect_rollouts, RolloutActor, RolloutBatch, VecEnvs};
pub use update::{
    combined_objective_step, ppo_update, pretrain_multitask, CombinedSpec, UpdateContext,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentError;
use crate::diffcore::DiffError;
use crate::envs::{EnvError, EnvKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged at update {update}: {detail}")]
    Diverged { update: u64, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// The learning-rate grid every method is tuned over.
pub const SWEEP_LRS: [f64; 5] = [3e-3, 1e-3, 3e-4, 1e-4, 3e-5];

/// PPO hyperparameters. The learning rate comes from the sweep grid; the
/// task-inference modules train at their own fixed rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub policy_lr: f64,
    pub inference_lr: f64,
    pub clip_ratio: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub n_envs: usize,
    pub linear_lr_decay: bool,
    /// Weight on J_prior relative to J_infer.
    pub prior_weight: f64,
    /// Global gradient-norm clip per optimizer, applied before each step.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            policy_lr: 3e-4,
            inference_lr: 1e-3,
            clip_ratio: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatches: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            n_envs: 16,
            linear_lr_decay: false,
            prior_weight: 1.0,
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    /// Frames consumed by one update: the rollout horizon is one whole
    /// meta-episode per environment. 16 grid envs give 960 frames.
    pub fn frames_per_update(&self, kind: EnvKind) -> u64 {
        (self.n_envs * kind.meta_len()) as u64
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_envs == 0 {
            return Err(TrainError::Config("n_envs must be positive".into()));
        }
        if self.minibatches == 0 || self.minibatches > self.n_envs {
            return Err(TrainError::Config(format!(
                "minibatches must lie in 1..={}, got {}",
                self.n_envs, self.minibatches
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Pretraining budget: the multi-task phase consumes updates from the same
/// total frame budget the meta phase uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainBudget {
    pub multitask_updates: u64,
    pub total_frames: u64,
}

impl PretrainBudget {
    /// Frame split: pretrain frames + meta frames == the total budget.
    pub fn split(&self, cfg: &PpoConfig, kind: EnvKind) -> Result<(u64, u64), TrainError> {
        let per_update = cfg.frames_per_update(kind);
        let pretrain = self.multitask_updates * per_update;
        if pretrain > self.total_frames {
            return Err(TrainError::Config(format!(
                "pretraining consumes {pretrain} frames, more than the budget {}",
                self.total_frames
            )));
        }
        let meta = self.total_frames - pretrain;
        if meta % per_update != 0 {
            return Err(TrainError::Config(format!(
                "budget {} does not divide into {per_update}-frame updates",
                self.total_frames
            )));
        }
        Ok((pretrain, meta))
    }
}

/// Per-update loss summary; the optional fields stay empty for methods
/// without the corresponding objective or probe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub j_infer: Option<f64>,
    pub j_prior: Option<f64>,
    pub latent_grad_norm: Option<f64>,
}

/// Policy learning rate at one update: constant by default, linear to zero
/// over the run when decay is enabled (the final update still trains at a
/// positive rate).
pub fn lr_schedule(cfg: &PpoConfig, update_idx: u64, total_updates: u64) -> f64 {
    if cfg.linear_lr_decay && total_updates > 0 {
        cfg.policy_lr * (1.0 - update_idx as f64 / total_updates as f64)
    } else {
        cfg.policy_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_constant_and_linear() {
        let mut cfg = PpoConfig::default();
        assert_eq!(lr_schedule(&cfg, 500, 1000), cfg.policy_lr);
        cfg.linear_lr_decay = true;
        assert_eq!(lr_schedule(&cfg, 0, 1000), cfg.policy_lr);
        assert_eq!(lr_schedule(&cfg, 500, 1000), 0.5 * cfg.policy_lr);
        let last = lr_schedule(&cfg, 999, 1000);
        assert!(last > 0.0 && last < 0.002 * cfg.policy_lr + 1e-12);
    }

    #[test]
    fn frames_per_update_matches_grid_spec() {
        let cfg = PpoConfig::default();
        assert_eq!(cfg.frames_per_update(EnvKind::Grid), 960);
        assert_eq!(cfg.frames_per_update(EnvKind::MemoryCorridor), 576);
    }

    #[test]
    fn budget_split_is_exact() {
        let cfg = PpoConfig::default();
        // Exact accounting needs a budget divisible by the 960 frames per
        // update; 3,840,000 is 4000 updates' worth.
        let budget = PretrainBudget { multitask_updates: 100, total_frames: 3_840_000 };
        let (pre, meta) = budget.split(&cfg, EnvKind::Grid).unwrap();
        assert_eq!(pre, 96_000);
        assert_eq!(pre + meta, 3_840_000);
        // A 100-update grid pretrain is 96,000 frames, 2.4% of 4M.
        assert!((96_000.0_f64 / 4_000_000.0 - 0.024).abs() < 1e-12);
    }

    #[test]
    fn budget_overrun_is_rejected() {
        let cfg = PpoConfig::default();
        let budget = PretrainBudget { multitask_updates: 10, total_frames: 960 };
        assert!(budget.split(&cfg, EnvKind::Grid).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = PpoConfig::default();
        assert!(ok.validate().is_ok());
        assert!(PpoConfig { n_envs: 0, ..ok.clone() }.validate().is_err());
        assert!(PpoConfig { minibatches: 20, ..ok.clone() }.validate().is_err());
        assert!(PpoConfig { gamma: 1.0, ..ok }.validate().is_err());
    }
}

//! The method zoo: RNN, RNN+S, RNN+HN, TI Naive, TI, TI++, TI+HN, TI++HN,
//! VI, VI+HN, BI++HN as one configurable agent, plus the privileged
//! multi-task policy (Multi / Multi+HN) used for pretraining.

mod meta;
mod multitask;

pub use meta::{
    ActBatch, CombinedTarget, InferTargets, MetaAgent, RlLossNodes, StepNodes, UnrollInputs,
    UnrollNodes,
};
pub use multitask::{
    inference_batch_source, reuse_initialize, ArchivedMetaEpisode, InferenceSample,
    MultiTaskAgent, MultiTaskArtifacts,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;
use crate::envs::EnvKind;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("unknown method name: {0}")]
    UnknownMethod(String),
    #[error("{0}")]
    Incompatible(String),
}

/// What the trajectory encoder is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceTarget {
    /// End-to-end: no inference objective.
    None,
    /// The given ground-truth task one-hot.
    Given,
    /// A task embedding learned during multi-task pretraining.
    Learned,
    /// Full trajectories (next states and rewards), including future steps.
    Transitions,
    /// The base-network parameters emitted by the multi-task hypernetwork.
    BaseNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperInit {
    BiasHyper,
    Kaiming,
}

/// Component flags of one method, mirroring the summary-table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentConfig {
    pub target: InferenceTarget,
    pub condition_on_state: bool,
    pub hypernetwork: bool,
    /// The "++" additions: inference training over multi-task-phase
    /// trajectories and parameter reuse from the pretrained policy.
    pub multi_phase_reuse: bool,
    pub hyper_init: HyperInit,
}

/// The named method variants selectable by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Rnn,
    RnnS,
    RnnHn,
    TiNaive,
    Ti,
    TiPlusPlus,
    TiHn,
    TiPlusPlusHn,
    Vi,
    ViHn,
    BiPlusPlusHn,
    Multi,
    MultiHn,
}

impl Method {
    pub const ALL_META: [Method; 11] = [
        Method::Rnn,
        Method::RnnS,
        Method::RnnHn,
        Method::TiNaive,
        Method::Ti,
        Method::TiPlusPlus,
        Method::TiHn,
        Method::TiPlusPlusHn,
        Method::Vi,
        Method::ViHn,
        Method::BiPlusPlusHn,
    ];

    pub fn parse(name: &str) -> Result<Self, AgentError> {
        match name {
            "RNN" => Ok(Method::Rnn),
            "RNN+S" => Ok(Method::RnnS),
            "RNN+HN" => Ok(Method::RnnHn),
            "TI-Naive" => Ok(Method::TiNaive),
            "TI" => Ok(Method::Ti),
            "TI++" => Ok(Method::TiPlusPlus),
            "TI+HN" => Ok(Method::TiHn),
            "TI++HN" => Ok(Method::TiPlusPlusHn),
            "VI" => Ok(Method::Vi),
            "VI+HN" => Ok(Method::ViHn),
            "BI++HN" => Ok(Method::BiPlusPlusHn),
            "Multi" => Ok(Method::Multi),
            "Multi+HN" => Ok(Method::MultiHn),
            other => Err(AgentError::UnknownMethod(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Rnn => "RNN",
            Method::RnnS => "RNN+S",
            Method::RnnHn => "RNN+HN",
            Method::TiNaive => "TI-Naive",
            Method::Ti => "TI",
            Method::TiPlusPlus => "TI++",
            Method::TiHn => "TI+HN",
            Method::TiPlusPlusHn => "TI++HN",
            Method::Vi => "VI",
            Method::ViHn => "VI+HN",
            Method::BiPlusPlusHn => "BI++HN",
            Method::Multi => "Multi",
            Method::MultiHn => "Multi+HN",
        }
    }

    pub fn is_multitask(&self) -> bool {
        matches!(self, Method::Multi | Method::MultiHn)
    }

    /// Component-matrix row for this method.
    pub fn config(&self) -> AgentConfig {
        use InferenceTarget::*;
        let (target, condition_on_state, hypernetwork, multi_phase_reuse) = match self {
            Method::Rnn => (None, false, false, false),
            Method::RnnS => (None, true, false, false),
            Method::RnnHn => (None, true, true, false),
            Method::TiNaive => (Given, true, false, false),
            Method::Ti => (Learned, true, false, false),
            Method::TiPlusPlus => (Learned, true, false, true),
            Method::TiHn => (Learned, true, true, false),
            Method::TiPlusPlusHn => (Learned, true, true, true),
            Method::Vi => (Transitions, true, false, false),
            Method::ViHn => (Transitions, true, true, false),
            Method::BiPlusPlusHn => (BaseNet, true, true, true),
            Method::Multi => (None, true, false, false),
            Method::MultiHn => (None, true, true, false),
        };
        AgentConfig {
            target,
            condition_on_state,
            hypernetwork,
            multi_phase_reuse,
            hyper_init: HyperInit::BiasHyper,
        }
    }

    /// Variants that need the multi-task pretraining phase.
    pub fn needs_pretraining(&self) -> bool {
        matches!(self.config().target, InferenceTarget::Learned | InferenceTarget::BaseNet)
    }
}

/// Network widths. Defaults are the full-scale sizes; tests and desk-scale
/// runs shrink them through configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSizes {
    /// State embedding feeding the trajectory encoder.
    pub enc_obs_embed: usize,
    pub enc_act_embed: usize,
    pub enc_rew_embed: usize,
    pub gru_hidden: usize,
    /// Information-bottleneck width (mu, sigma, z).
    pub latent_dim: usize,
    /// Projection width for task embeddings and (mu, sigma); 25 covers a
    /// one-hot of every discrete task distribution here.
    pub task_proj: usize,
    /// State embedding passed to the policy (and critic).
    pub state_embed: usize,
    pub base_hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub vi_decoder_hidden: Vec<usize>,
}

impl Default for NetSizes {
    fn default() -> Self {
        NetSizes {
            enc_obs_embed: 32,
            enc_act_embed: 16,
            enc_rew_embed: 16,
            gru_hidden: 256,
            latent_dim: 25,
            task_proj: 25,
            state_embed: 256,
            base_hidden: vec![256, 128],
            hyper_hidden: vec![256],
            critic_hidden: vec![256, 128],
            vi_decoder_hidden: vec![64],
        }
    }
}

impl NetSizes {
    /// Small configuration for unit tests and quick verification runs.
    pub fn tiny() -> Self {
        NetSizes {
            enc_obs_embed: 6,
            enc_act_embed: 4,
            enc_rew_embed: 4,
            gru_hidden: 8,
            latent_dim: 4,
            task_proj: 6,
            state_embed: 6,
            base_hidden: vec![8],
            hyper_hidden: vec![8],
            critic_hidden: vec![8],
            vi_decoder_hidden: vec![8],
        }
    }

    /// Desk-scale configuration used by the training reproductions.
    pub fn desk() -> Self {
        NetSizes {
            enc_obs_embed: 16,
            enc_act_embed: 8,
            enc_rew_embed: 8,
            gru_hidden: 48,
            latent_dim: 8,
            task_proj: 25,
            state_embed: 16,
            base_hidden: vec![32, 32],
            hyper_hidden: vec![48],
            critic_hidden: vec![48, 32],
            vi_decoder_hidden: vec![32],
        }
    }
}

/// Environment-derived widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvDims {
    pub obs: usize,
    pub actions: usize,
    pub label: usize,
    pub tasks: usize,
}

impl EnvDims {
    pub fn of(kind: EnvKind) -> Self {
        EnvDims {
            obs: kind.obs_width(),
            actions: kind.action_count(),
            label: kind.label_width(),
            tasks: kind.task_count(),
        }
    }
}

//! Declarative run configuration: a flat TOML file with strict unknown-key
//! rejection. One file describes one run (or one sweep).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use metarl::agents::{HyperInit, Method, NetSizes};
use metarl::envs::EnvKind;
use metarl::trainer::{CombinedSpec, PpoConfig, PretrainBudget, SWEEP_LRS};

/// Flat run configuration. Every key is optional except `method` and `env`;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: String,
    pub env: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_total_frames")]
    pub total_frames: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,

    // PPO overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_coef: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_coef: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gae_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_envs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_lr_decay: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,

    // Pretraining budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_updates: Option<u64>,

    // Probes and debugging.
    #[serde(default)]
    pub probe_latent_grad: bool,
    #[serde(default)]
    pub dump_trajectories: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper_init: Option<String>,

    // Combined-objective mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_target: Option<String>,

    // Checkpointing / resumption.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<String>,

    // Sweep grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_lrs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_seeds: Option<Vec<u64>>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_selection_tail")]
    pub selection_tail: f64,

    // Network sizes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enc_obs_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enc_act_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enc_rew_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_proj: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vi_decoder_hidden: Option<Vec<usize>>,
}

fn default_total_frames() -> u64 {
    96_000
}

fn default_checkpoint_every() -> u64 {
    100
}

fn default_ci_level() -> f64 {
    0.68
}

fn default_resamples() -> usize {
    1000
}

fn default_selection_tail() -> f64 {
    0.1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.validated()
    }

    fn validated(self) -> Result<Self> {
        self.method()?;
        self.env_kind()?;
        if let Some(w) = self.combined_weight {
            if !(0.0..=1.0).contains(&w) {
                bail!("combined_weight must lie in [0, 1], got {w}");
            }
        }
        self.combined()?;
        if let Some(h) = &self.hyper_init {
            self.parse_hyper_init(h)?;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method).map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        EnvKind::parse(&self.env).map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn ppo(&self) -> PpoConfig {
        let d = PpoConfig::default();
        PpoConfig {
            policy_lr: self.policy_lr.unwrap_or(d.policy_lr),
            inference_lr: self.inference_lr.unwrap_or(d.inference_lr),
            clip_ratio: self.clip_ratio.unwrap_or(d.clip_ratio),
            value_coef: self.value_coef.unwrap_or(d.value_coef),
            entropy_coef: self.entropy_coef.unwrap_or(d.entropy_coef),
            epochs: self.epochs.unwrap_or(d.epochs),
            minibatches: self.minibatches.unwrap_or(d.minibatches),
            gamma: self.gamma.unwrap_or(d.gamma),
            gae_lambda: self.gae_lambda.unwrap_or(d.gae_lambda),
            n_envs: self.n_envs.unwrap_or(d.n_envs),
            linear_lr_decay: self.linear_lr_decay.unwrap_or(d.linear_lr_decay),
            prior_weight: self.prior_weight.unwrap_or(d.prior_weight),
            max_grad_norm: self.max_grad_norm.or(d.max_grad_norm),
        }
    }

    pub fn sizes(&self) -> NetSizes {
        let d = NetSizes::default();
        NetSizes {
            enc_obs_embed: self.enc_obs_embed.unwrap_or(d.enc_obs_embed),
            enc_act_embed: self.enc_act_embed.unwrap_or(d.enc_act_embed),
            enc_rew_embed: self.enc_rew_embed.unwrap_or(d.enc_rew_embed),
            gru_hidden: self.gru_hidden.unwrap_or(d.gru_hidden),
            latent_dim: self.latent_dim.unwrap_or(d.latent_dim),
            task_proj: self.task_proj.unwrap_or(d.task_proj),
            state_embed: self.state_embed.unwrap_or(d.state_embed),
            base_hidden: self.base_hidden.clone().unwrap_or(d.base_hidden),
            hyper_hidden: self.hyper_hidden.clone().unwrap_or(d.hyper_hidden),
            critic_hidden: self.critic_hidden.clone().unwrap_or(d.critic_hidden),
            vi_decoder_hidden: self.vi_decoder_hidden.clone().unwrap_or(d.vi_decoder_hidden),
        }
    }

    pub fn budget(&self) -> Result<PretrainBudget> {
        let method = self.method()?;
        let default_updates = if method.needs_pretraining()
            || matches!(self.combined_target.as_deref(), Some("learned" | "base-net"))
        {
            self.default_pretrain_updates()
        } else {
            0
        };
        Ok(PretrainBudget {
            multitask_updates: self.pretrain_updates.unwrap_or(default_updates),
            total_frames: self.total_frames,
        })
    }

    /// Default pretraining share: 100 updates on grids; elsewhere the same
    /// fraction of the total budget those 100 updates would be (2.4%).
    fn default_pretrain_updates(&self) -> u64 {
        match self.env_kind() {
            Ok(kind) if kind.is_grid() => 100,
            Ok(kind) => {
                let per_update = self.ppo().frames_per_update(kind);
                ((self.total_frames as f64 * 0.024) / per_update as f64).round() as u64
            }
            Err(_) => 0,
        }
    }

    pub fn hyper_init_kind(&self) -> Result<HyperInit> {
        match &self.hyper_init {
            None => Ok(HyperInit::BiasHyper),
            Some(name) => self.parse_hyper_init(name),
        }
    }

    fn parse_hyper_init(&self, name: &str) -> Result<HyperInit> {
        match name {
            "bias-hyper" => Ok(HyperInit::BiasHyper),
            "kaiming" => Ok(HyperInit::Kaiming),
            other => bail!("unknown hyper_init {other:?} (expected bias-hyper | kaiming)"),
        }
    }

    pub fn combined(&self) -> Result<Option<(f64, CombinedSpec)>> {
        match (self.combined_weight, &self.combined_target) {
            (None, None) => Ok(None),
            (Some(w), Some(t)) => Ok(Some((w, self.parse_combined_target(t)?))),
            (Some(w), None) => Ok(Some((w, CombinedSpec::Given))),
            (None, Some(_)) => bail!("combined_target set without combined_weight"),
        }
    }

    fn parse_combined_target(&self, name: &str) -> Result<CombinedSpec> {
        match name {
            "given" => Ok(CombinedSpec::Given),
            "learned" => Ok(CombinedSpec::Learned),
            "base-net" => Ok(CombinedSpec::BaseNet),
            other => bail!("unknown combined_target {other:?} (expected given | learned | base-net)"),
        }
    }

    pub fn sweep_lrs(&self) -> Vec<f64> {
        self.sweep_lrs.clone().unwrap_or_else(|| SWEEP_LRS.to_vec())
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.sweep_seeds.clone().unwrap_or_else(|| vec![self.seed, self.seed + 1, self.seed + 2])
    }

    /// Stable digest over the run-identity keys, recorded in checkpoint
    /// manifests so resumption can refuse a mismatched config. Operational
    /// keys (the output directory and the resume pointer itself) are
    /// excluded: they do not change what the run computes.
    pub fn hash(&self) -> Result<String> {
        let mut identity = self.clone();
        identity.out_dir = None;
        identity.resume_from = None;
        let canonical = identity.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = \"RNN+HN\"\nenv = \"grid\"\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.method().unwrap(), Method::RnnHn);
        assert_eq!(cfg.env_kind().unwrap(), EnvKind::Grid);
        assert_eq!(cfg.ppo(), PpoConfig::default());
        assert_eq!(cfg.sizes(), NetSizes::default());
        assert_eq!(cfg.sweep_lrs(), SWEEP_LRS.to_vec());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}learning_rate_typo = 0.1\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(format!("{err:?}").contains("parsing run config"), "{err}");
    }

    #[test]
    fn unknown_method_and_env_rejected() {
        assert!(RunConfig::parse("method = \"MAML\"\nenv = \"grid\"\n").is_err());
        assert!(RunConfig::parse("method = \"RNN\"\nenv = \"atari\"\n").is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let text = format!(
            "{MINIMAL}seed = 7\npolicy_lr = 0.001\nbase_hidden = [32, 32]\nprobe_latent_grad = true\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let serialized = cfg.to_toml().unwrap();
        let reparsed = RunConfig::parse(&serialized).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(cfg.hash().unwrap(), reparsed.hash().unwrap());
    }

    #[test]
    fn combined_validation() {
        assert!(RunConfig::parse(&format!("{MINIMAL}combined_weight = 1.5\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}combined_target = \"given\"\n")).is_err());
        let ok = RunConfig::parse(&format!(
            "{MINIMAL}combined_weight = 0.1\ncombined_target = \"given\"\n"
        ))
        .unwrap();
        assert_eq!(ok.combined().unwrap(), Some((0.1, CombinedSpec::Given)));
    }

    #[test]
    fn pretrain_default_follows_env() {
        let grid = RunConfig::parse("method = \"TI\"\nenv = \"grid\"\n").unwrap();
        assert_eq!(grid.budget().unwrap().multitask_updates, 100);
        let rnn = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(rnn.budget().unwrap().multitask_updates, 0);
        // Non-grid: 2.4% of the budget.
        let mc = RunConfig::parse(
            "method = \"TI\"\nenv = \"memory-corridor\"\ntotal_frames = 576000\n",
        )
        .unwrap();
        assert_eq!(mc.budget().unwrap().multitask_updates, 24);
    }
}

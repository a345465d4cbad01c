use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::nets::{
    gru_step, hypernet_forward, init_bias_hyper, init_gru, init_kaiming, init_linear, init_mlp,
    kl_node, mlp_forward, mlp_forward_generated, BeliefNodes, Bottleneck, BoundParams, GruSpec,
    HypernetSpec, LatentBelief, MlpSpec, OutputHead,
};

use super::{AgentConfig, AgentError, EnvDims, HyperInit, InferenceTarget, Method, NetSizes};

/// One configurable meta-RL agent covering every method row: a trajectory
/// encoder (embedders + GRU), an optional information bottleneck, an optional
/// hypernetwork, the policy head, and a critic.
///
/// The acting path never sees the task label; privileged information enters
/// only through the training objectives.
pub struct MetaAgent {
    pub method: Method,
    pub config: AgentConfig,
    pub sizes: NetSizes,
    pub dims: EnvDims,
    pub params: ParamSet,
    gru: GruSpec,
    bottleneck: Option<Bottleneck>,
    base_spec: MlpSpec,
    hyper_spec: Option<HypernetSpec>,
    critic_spec: MlpSpec,
    vi_spec: Option<MlpSpec>,
    policy_names: Vec<String>,
    inference_names: Vec<String>,
}

impl MetaAgent {
    pub fn new<R: Rng>(
        method: Method,
        sizes: NetSizes,
        dims: EnvDims,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        Self::with_init(method, sizes, dims, method.config().hyper_init, rng)
    }

    pub fn with_init<R: Rng>(
        method: Method,
        sizes: NetSizes,
        dims: EnvDims,
        hyper_init: HyperInit,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        if method.is_multitask() {
            return Err(AgentError::Incompatible(format!(
                "{} is a multi-task policy, not a meta agent",
                method.name()
            )));
        }
        let mut config = method.config();
        config.hyper_init = hyper_init;
        let mut params = ParamSet::new();

        // Trajectory encoder: state / previous-action / previous-reward
        // embedders, a done flag, and a single GRU layer.
        init_linear(&mut params, "enc.obs", dims.obs, sizes.enc_obs_embed, 2.0, rng)?;
        init_linear(&mut params, "enc.act", dims.actions, sizes.enc_act_embed, 2.0, rng)?;
        init_linear(&mut params, "enc.rew", 1, sizes.enc_rew_embed, 2.0, rng)?;
        let gru = GruSpec {
            input: sizes.enc_obs_embed + sizes.enc_act_embed + sizes.enc_rew_embed + 1,
            hidden: sizes.gru_hidden,
        };
        init_gru(&mut params, "enc.gru", &gru, rng)?;

        let bottleneck = if config.target == InferenceTarget::None {
            None
        } else {
            let b = Bottleneck {
                encoder_width: sizes.gru_hidden,
                latent_dim: sizes.latent_dim,
                projection: sizes.task_proj,
            };
            b.init(&mut params, "bot", rng)?;
            Some(b)
        };

        // Width of the latent entering the policy (and the critic).
        let latent_width = match config.target {
            InferenceTarget::None => sizes.gru_hidden,
            _ => sizes.task_proj,
        };

        let base_input = if config.hypernetwork {
            sizes.state_embed
        } else if config.condition_on_state {
            sizes.state_embed + latent_width
        } else {
            latent_width
        };
        let base_spec =
            MlpSpec::new(base_input, sizes.base_hidden.clone(), dims.actions, OutputHead::CategoricalLogits);

        // Inference decoders.
        let mut vi_spec = None;
        match config.target {
            InferenceTarget::None => {}
            InferenceTarget::Given => {
                init_linear(&mut params, "dec.p_c", sizes.latent_dim, dims.label, 1.0, rng)?;
            }
            InferenceTarget::Learned => {
                init_linear(&mut params, "dec.p_g", sizes.latent_dim, sizes.task_proj, 1.0, rng)?;
            }
            InferenceTarget::Transitions => {
                let spec = MlpSpec::new(
                    sizes.latent_dim + dims.obs + dims.actions,
                    sizes.vi_decoder_hidden.clone(),
                    dims.obs + 1,
                    OutputHead::ValueScalar,
                );
                init_mlp(&mut params, "dec.vi", &spec, rng)?;
                vi_spec = Some(spec);
            }
            InferenceTarget::BaseNet => {
                init_linear(
                    &mut params,
                    "dec.p_phiprime",
                    sizes.latent_dim,
                    base_spec.param_count(),
                    1.0,
                    rng,
                )?;
            }
        }

        // Policy path. The critic gets its own state embedder so value-loss
        // gradients cannot reshape the policy's input representation.
        init_linear(&mut params, "pol.se", dims.obs, sizes.state_embed, 2.0, rng)?;
        init_linear(&mut params, "critic.se", dims.obs, sizes.state_embed, 2.0, rng)?;
        let hyper_spec = if config.hypernetwork {
            let spec = HypernetSpec {
                latent: latent_width,
                hidden: sizes.hyper_hidden.clone(),
                target: base_spec.clone(),
            };
            match config.hyper_init {
                HyperInit::BiasHyper => init_bias_hyper(&mut params, "pol.hyper", &spec, rng)?,
                HyperInit::Kaiming => init_kaiming(&mut params, "pol.hyper", &spec, rng)?,
            }
            Some(spec)
        } else {
            init_mlp(&mut params, "pol.mlp", &base_spec, rng)?;
            None
        };

        let critic_spec = MlpSpec::new(
            sizes.state_embed + latent_width,
            sizes.critic_hidden.clone(),
            1,
            OutputHead::ValueScalar,
        );
        init_mlp(&mut params, "critic", &critic_spec, rng)?;

        // Optimizer partition. End-to-end variants train everything on the
        // RL objective; bottleneck variants train the encoder, the mu/sigma
        // heads and the decoders only through the inference objectives.
        let mut policy_names = Vec::new();
        let mut inference_names = Vec::new();
        for name in params.names() {
            let policy_side = if config.target == InferenceTarget::None {
                true
            } else {
                name.starts_with("pol.") || name.starts_with("critic") || name.starts_with("bot.p_phi.")
            };
            if policy_side {
                policy_names.push(name.to_string());
            } else {
                inference_names.push(name.to_string());
            }
        }

        Ok(MetaAgent {
            method,
            config,
            sizes,
            dims,
            params,
            gru,
            bottleneck,
            base_spec,
            hyper_spec,
            critic_spec,
            vi_spec,
            policy_names,
            inference_names,
        })
    }

    pub fn gru_hidden(&self) -> usize {
        self.gru.hidden
    }

    pub fn latent_dim(&self) -> usize {
        self.sizes.latent_dim
    }

    pub fn base_spec(&self) -> &MlpSpec {
        &self.base_spec
    }

    pub fn hyper_spec(&self) -> Option<&HypernetSpec> {
        self.hyper_spec.as_ref()
    }

    /// Parameters stepped by the policy optimizer.
    pub fn policy_param_names(&self) -> &[String] {
        &self.policy_names
    }

    /// Parameters stepped by the task-inference optimizer.
    pub fn inference_param_names(&self) -> &[String] {
        &self.inference_names
    }

    /// One forward step for every parallel environment.
    ///
    /// The acting path is structurally label-free: nothing here accepts a
    /// task, so no privileged information can leak into the policy.
    pub fn act(
        &self,
        obs: &Tensor,
        prev_act_onehot: &Tensor,
        prev_rew: &Tensor,
        done_flag: &Tensor,
        state: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<ActBatch, AgentError> {
        if obs.cols() != self.dims.obs {
            return Err(AgentError::Incompatible(format!(
                "observation width {} != expected {}",
                obs.cols(),
                self.dims.obs
            )));
        }
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params)?;
        let obs_n = g.input(obs.clone())?;
        let act_n = g.input(prev_act_onehot.clone())?;
        let rew_n = g.input(prev_rew.clone())?;
        let done_n = g.input(done_flag.clone())?;
        let state_n = g.input(state.clone())?;
        let noise_n = match noise {
            Some(n) => Some(g.input(n.clone())?),
            None => match self.bottleneck {
                Some(b) => Some(g.input(Tensor::zeros(obs.rows(), b.latent_dim))?),
                None => None,
            },
        };
        let nodes = self.step(&mut g, &bound, obs_n, act_n, rew_n, done_n, state_n, noise_n)?;
        let probs_t = g.row_softmax(nodes.logits)?;
        let logp_t = g.row_log_softmax(nodes.logits)?;

        let b = obs.rows();
        let probs = (0..b).map(|r| g.value(probs_t).row(r).to_vec()).collect();
        let log_probs = (0..b).map(|r| g.value(logp_t).row(r).to_vec()).collect();
        let values = (0..b).map(|r| g.value(nodes.value).row(r)[0]).collect();
        let beliefs = nodes.belief.map(|bn| {
            (0..b)
                .map(|r| LatentBelief {
                    mu: g.value(bn.mu).row(r).to_vec(),
                    sigma: g.value(bn.sigma).row(r).to_vec(),
                    z: g.value(bn.z).row(r).to_vec(),
                    phi_input: g.value(bn.phi_input).row(r).to_vec(),
                })
                .collect()
        });
        Ok(ActBatch {
            probs,
            log_probs,
            values,
            state: g.value(nodes.state).clone(),
            beliefs,
        })
    }

    /// Wire one time step. `state` is `[B, gru_hidden]`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        obs: NodeId,
        prev_act: NodeId,
        prev_rew: NodeId,
        done: NodeId,
        state: NodeId,
        noise: Option<NodeId>,
    ) -> Result<StepNodes, DiffError> {
        let obs_e = bound.affine(g, "enc.obs", obs)?;
        let obs_e = g.relu(obs_e)?;
        let act_e = bound.affine(g, "enc.act", prev_act)?;
        let act_e = g.relu(act_e)?;
        let rew_e = bound.affine(g, "enc.rew", prev_rew)?;
        let rew_e = g.relu(rew_e)?;
        let x = g.concat_cols(&[obs_e, act_e, rew_e, done])?;
        let new_state = gru_step(g, bound, "enc.gru", &self.gru, state, x)?;

        let (latent, belief) = match &self.bottleneck {
            Some(b) => {
                let noise = noise.expect("bottleneck forward requires noise");
                let nodes = b.forward(g, bound, "bot", new_state, noise)?;
                (nodes.phi_input, Some(nodes))
            }
            None => (new_state, None),
        };

        let state_e = bound.affine(g, "pol.se", obs)?;
        let state_e = g.relu(state_e)?;

        let (logits, probe, phi) = match &self.hyper_spec {
            Some(spec) => {
                let (phi, first_hidden) = hypernet_forward(g, bound, "pol.hyper", spec, latent)?;
                let logits = mlp_forward_generated(g, &spec.target, phi, state_e)?;
                (logits, first_hidden, Some(phi))
            }
            None => {
                let input = if self.config.condition_on_state {
                    g.concat_cols(&[state_e, latent])?
                } else {
                    latent
                };
                let logits = mlp_forward(g, bound, "pol.mlp", &self.base_spec, input)?;
                (logits, latent, None)
            }
        };

        let critic_e = bound.affine(g, "critic.se", obs)?;
        let critic_e = g.relu(critic_e)?;
        let critic_in = g.concat_cols(&[critic_e, latent])?;
        let value = mlp_forward(g, bound, "critic", &self.critic_spec, critic_in)?;

        Ok(StepNodes { logits, value, state: new_state, belief, probe, phi })
    }

    /// Unroll one whole meta-episode for a batch of environments, recurrent
    /// state starting from zeros.
    pub fn unroll(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        inputs: &UnrollInputs,
    ) -> Result<UnrollNodes, DiffError> {
        let t_len = inputs.obs.len();
        let b = inputs.obs[0].rows();
        let mut state = g.input(Tensor::zeros(b, self.gru.hidden))?;
        let mut out = UnrollNodes {
            logits: Vec::with_capacity(t_len),
            values: Vec::with_capacity(t_len),
            states: Vec::with_capacity(t_len),
            beliefs: Vec::with_capacity(t_len),
            probes: Vec::with_capacity(t_len),
            phis: Vec::with_capacity(t_len),
        };
        for t in 0..t_len {
            let obs = g.input(inputs.obs[t].clone())?;
            let act = g.input(inputs.prev_act[t].clone())?;
            let rew = g.input(inputs.prev_rew[t].clone())?;
            let done = g.input(inputs.done[t].clone())?;
            let noise = match (&self.bottleneck, &inputs.noise) {
                (Some(_), Some(n)) => Some(g.input(n[t].clone())?),
                (Some(bn), None) => Some(g.input(Tensor::zeros(b, bn.latent_dim))?),
                (None, _) => None,
            };
            let nodes = self.step(g, bound, obs, act, rew, done, state, noise)?;
            state = nodes.state;
            out.logits.push(nodes.logits);
            out.values.push(nodes.value);
            out.states.push(nodes.state);
            if let Some(bn) = nodes.belief {
                out.beliefs.push(bn);
            }
            out.probes.push(nodes.probe);
            if let Some(phi) = nodes.phi {
                out.phis.push(phi);
            }
        }
        Ok(out)
    }

    /// Clipped-surrogate PPO loss with value and entropy terms.
    #[allow(clippy::too_many_arguments)]
    pub fn rl_loss(
        &self,
        g: &mut Graph,
        nodes: &UnrollNodes,
        actions: &[Vec<usize>],
        old_logp: &[Tensor],
        advantages: &[Tensor],
        returns: &[Tensor],
        clip: f64,
        value_coef: f64,
        entropy_coef: f64,
    ) -> Result<RlLossNodes, DiffError> {
        let t_len = nodes.logits.len();
        let b = g.value(nodes.logits[0]).rows();
        let denom = 1.0 / (t_len * b) as f64;

        let mut surrogate_sum = g.scalar(0.0)?;
        let mut value_sum = g.scalar(0.0)?;
        let mut entropy_sum = g.scalar(0.0)?;
        for t in 0..t_len {
            let logp_all = g.row_log_softmax(nodes.logits[t])?;
            let logp = g.gather_col(logp_all, &actions[t])?;
            let old = g.input(old_logp[t].clone())?;
            let diff = g.sub(logp, old)?;
            let ratio = g.exp(diff)?;
            let adv = g.input(advantages[t].clone())?;
            let surr1 = g.mul(ratio, adv)?;
            let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
            let surr2 = g.mul(clipped, adv)?;
            let surr = g.min_elem(surr1, surr2)?;
            let s = g.sum_all(surr)?;
            surrogate_sum = g.add(surrogate_sum, s)?;

            let ret = g.input(returns[t].clone())?;
            let vdiff = g.sub(nodes.values[t], ret)?;
            let vsq = g.mul(vdiff, vdiff)?;
            let vs = g.sum_all(vsq)?;
            value_sum = g.add(value_sum, vs)?;

            let probs = g.row_softmax(nodes.logits[t])?;
            let plogp = g.mul(probs, logp_all)?;
            let es = g.sum_all(plogp)?;
            entropy_sum = g.add(entropy_sum, es)?;
        }
        let policy = g.scale(surrogate_sum, -denom)?;
        let value = g.scale(value_sum, denom)?;
        let entropy = g.scale(entropy_sum, -denom)?;

        let v_term = g.scale(value, value_coef)?;
        let e_term = g.scale(entropy, -entropy_coef)?;
        let total = g.add(policy, v_term)?;
        let total = g.add(total, e_term)?;
        Ok(RlLossNodes { total, policy, value, entropy })
    }

    /// KL of the bottleneck to the standard-normal prior, averaged over the
    /// unroll.
    pub fn prior_loss(&self, g: &mut Graph, nodes: &UnrollNodes) -> Result<NodeId, DiffError> {
        let t_len = nodes.beliefs.len() as f64;
        let mut acc = g.scalar(0.0)?;
        for bn in &nodes.beliefs {
            let kl = kl_node(g, bn.mu, bn.log_sigma)?;
            acc = g.add(acc, kl)?;
        }
        g.scale(acc, 1.0 / t_len)
    }

    /// Inference losses, squared-norm form: summed over target dimensions,
    /// averaged over batch rows and time steps.
    pub fn infer_loss(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        nodes: &UnrollNodes,
        target: &InferTargets<'_>,
    ) -> Result<NodeId, DiffError> {
        let t_len = nodes.beliefs.len();
        let b = g.value(nodes.beliefs[0].z).rows();
        match target {
            InferTargets::Given { labels } => {
                let want = g.input(Tensor::one_hot_rows(labels, self.dims.label)?)?;
                self.regression_sum(g, bound, nodes, "dec.p_c", want, t_len, b)
            }
            InferTargets::Learned { g_rows } => {
                let want = g.input(g_rows.clone())?;
                self.regression_sum(g, bound, nodes, "dec.p_g", want, t_len, b)
            }
            InferTargets::BaseNet { phi_rows } => {
                let want = g.input(phi_rows.clone())?;
                self.regression_sum(g, bound, nodes, "dec.p_phiprime", want, t_len, b)
            }
            InferTargets::Transitions { obs_stack, act_stack, target_stack } => {
                let spec = self.vi_spec.as_ref().expect("VI target requires the decoder");
                let obs_n = g.input((*obs_stack).clone())?;
                let act_n = g.input((*act_stack).clone())?;
                let want = g.input((*target_stack).clone())?;
                let mut acc = g.scalar(0.0)?;
                for bn in &nodes.beliefs {
                    let z_rep = g.repeat_rows(bn.z, t_len)?;
                    let dec_in = g.concat_cols(&[z_rep, obs_n, act_n])?;
                    let pred = mlp_forward(g, bound, "dec.vi", spec, dec_in)?;
                    let d = g.sub(pred, want)?;
                    let sq = g.mul(d, d)?;
                    let m = g.mean_all(sq)?;
                    acc = g.add(acc, m)?;
                }
                g.scale(acc, 1.0 / t_len as f64)
            }
        }
    }

    fn regression_sum(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        nodes: &UnrollNodes,
        head: &str,
        want: NodeId,
        t_len: usize,
        b: usize,
    ) -> Result<NodeId, DiffError> {
        let mut acc = g.scalar(0.0)?;
        for bn in &nodes.beliefs {
            let pred = bound.affine(g, head, bn.z)?;
            let d = g.sub(pred, want)?;
            let sq = g.mul(d, d)?;
            let s = g.sum_all(sq)?;
            acc = g.add(acc, s)?;
        }
        g.scale(acc, 1.0 / (t_len * b) as f64)
    }

    /// Combined-objective inference loss for RNN-architecture variants: no
    /// bottleneck and no projection layer; the recurrent output (or, for the
    /// base-net target, the generated parameter vector) is compared to the
    /// label directly.
    pub fn combined_infer_loss(
        &self,
        g: &mut Graph,
        nodes: &UnrollNodes,
        target: &CombinedTarget<'_>,
    ) -> Result<NodeId, DiffError> {
        if self.config.target != InferenceTarget::None {
            return Err(DiffError::InvalidArgument(
                "combined objective applies to end-to-end (RNN architecture) variants".into(),
            ));
        }
        let t_len = nodes.states.len();
        let b = g.value(nodes.states[0]).rows();
        let mut acc = g.scalar(0.0)?;
        match target {
            CombinedTarget::Given { labels } => {
                let w = self.dims.label;
                self.check_combined_width(w)?;
                let want = g.input(Tensor::one_hot_rows(labels, w)?)?;
                for t in 0..t_len {
                    let pred = g.slice_cols(nodes.states[t], 0, w)?;
                    let d = g.sub(pred, want)?;
                    let sq = g.mul(d, d)?;
                    let s = g.sum_all(sq)?;
                    acc = g.add(acc, s)?;
                }
            }
            CombinedTarget::Learned { g_rows } => {
                let w = g_rows.cols();
                self.check_combined_width(w)?;
                let want = g.input(g_rows.clone())?;
                for t in 0..t_len {
                    let pred = g.slice_cols(nodes.states[t], 0, w)?;
                    let d = g.sub(pred, want)?;
                    let sq = g.mul(d, d)?;
                    let s = g.sum_all(sq)?;
                    acc = g.add(acc, s)?;
                }
            }
            CombinedTarget::BaseNet { phi_rows } => {
                if nodes.phis.is_empty() {
                    return Err(DiffError::InvalidArgument(
                        "base-net combined target requires the hypernetwork architecture".into(),
                    ));
                }
                let want = g.input(phi_rows.clone())?;
                for t in 0..t_len {
                    let d = g.sub(nodes.phis[t], want)?;
                    let sq = g.mul(d, d)?;
                    let s = g.sum_all(sq)?;
                    acc = g.add(acc, s)?;
                }
            }
        }
        g.scale(acc, 1.0 / (t_len * b) as f64)
    }

    fn check_combined_width(&self, w: usize) -> Result<(), DiffError> {
        if self.gru.hidden < w {
            return Err(DiffError::InvalidArgument(format!(
                "recurrent width {} is narrower than the combined target width {w}",
                self.gru.hidden
            )));
        }
        Ok(())
    }
}

/// Outputs of a batched acting step.
#[derive(Clone, Debug)]
pub struct ActBatch {
    pub probs: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub state: Tensor,
    pub beliefs: Option<Vec<LatentBelief>>,
}

/// Graph handles of one wired step.
pub struct StepNodes {
    pub logits: NodeId,
    pub value: NodeId,
    pub state: NodeId,
    pub belief: Option<BeliefNodes>,
    pub probe: NodeId,
    pub phi: Option<NodeId>,
}

/// Per-step constant inputs for a whole-meta-episode unroll.
pub struct UnrollInputs {
    pub obs: Vec<Tensor>,
    pub prev_act: Vec<Tensor>,
    pub prev_rew: Vec<Tensor>,
    pub done: Vec<Tensor>,
    pub noise: Option<Vec<Tensor>>,
}

/// Graph handles of a full unroll.
pub struct UnrollNodes {
    pub logits: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub states: Vec<NodeId>,
    pub beliefs: Vec<BeliefNodes>,
    pub probes: Vec<NodeId>,
    pub phis: Vec<NodeId>,
}

/// RL loss components.
pub struct RlLossNodes {
    pub total: NodeId,
    pub policy: NodeId,
    pub value: NodeId,
    pub entropy: NodeId,
}

/// Target data for the inference objectives.
pub enum InferTargets<'a> {
    Given { labels: &'a [usize] },
    /// Frozen task-embedding rows `[B, task_proj]` of the true tasks.
    Learned { g_rows: Tensor },
    /// Stacked per-(i, b) decoder inputs/targets for full-trajectory
    /// reconstruction: row `i * B + b` covers transition `i` of env `b`.
    Transitions { obs_stack: &'a Tensor, act_stack: &'a Tensor, target_stack: &'a Tensor },
    /// Constant multi-task base-network parameters `[B, phi_len]`.
    BaseNet { phi_rows: Tensor },
}

/// Label data for the combined-objective mode.
pub enum CombinedTarget<'a> {
    Given { labels: &'a [usize] },
    Learned { g_rows: Tensor },
    BaseNet { phi_rows: Tensor },
}

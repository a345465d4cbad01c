use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::nets::{
    hypernet_forward, hypernet_generate, init_bias_hyper, init_kaiming, init_linear, init_mlp,
    mlp_forward, mlp_forward_generated, BoundParams, GeneratedParams, HypernetSpec, MlpSpec,
    OutputHead,
};

use super::{AgentError, EnvDims, HyperInit, MetaAgent, Method, NetSizes};

/// Privileged multi-task policy `pi'(a | s, g(c_M))`: feed-forward, conditioned
/// on a learned embedding of the true task label. Trained during the
/// pretraining phase; its embedding table and trajectories feed the
/// task-inference objectives afterwards.
pub struct MultiTaskAgent {
    pub hypernetwork: bool,
    pub hyper_init: HyperInit,
    pub sizes: NetSizes,
    pub dims: EnvDims,
    pub params: ParamSet,
    base_spec: MlpSpec,
    hyper_spec: Option<HypernetSpec>,
    critic_spec: MlpSpec,
}

impl MultiTaskAgent {
    pub fn new<R: Rng>(
        method: Method,
        sizes: NetSizes,
        dims: EnvDims,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let hypernetwork = match method {
            Method::Multi => false,
            Method::MultiHn => true,
            other => {
                return Err(AgentError::Incompatible(format!(
                    "{} is not a multi-task policy",
                    other.name()
                )))
            }
        };
        Self::build(hypernetwork, HyperInit::BiasHyper, sizes, dims, rng)
    }

    /// The pretraining counterpart of a meta agent: shares the hypernetwork
    /// flag so the "++" parameter reuse lines up shape for shape.
    pub fn for_meta<R: Rng>(meta: &MetaAgent, rng: &mut R) -> Result<Self, AgentError> {
        Self::build(
            meta.config.hypernetwork,
            meta.config.hyper_init,
            meta.sizes.clone(),
            meta.dims,
            rng,
        )
    }

    fn build<R: Rng>(
        hypernetwork: bool,
        hyper_init: HyperInit,
        sizes: NetSizes,
        dims: EnvDims,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let mut params = ParamSet::new();
        // Learned task embedding table g(c_M), one row per task.
        let g_std = 1.0 / (sizes.task_proj as f64).sqrt();
        params.insert("mt.g", Tensor::randn(dims.tasks, sizes.task_proj, g_std, rng))?;
        init_linear(&mut params, "mt.se", dims.obs, sizes.state_embed, 2.0, rng)?;
        init_linear(&mut params, "mt.critic_se", dims.obs, sizes.state_embed, 2.0, rng)?;

        let base_input = if hypernetwork {
            sizes.state_embed
        } else {
            sizes.state_embed + sizes.task_proj
        };
        let base_spec = MlpSpec::new(
            base_input,
            sizes.base_hidden.clone(),
            dims.actions,
            OutputHead::CategoricalLogits,
        );
        let hyper_spec = if hypernetwork {
            let spec = HypernetSpec {
                latent: sizes.task_proj,
                hidden: sizes.hyper_hidden.clone(),
                target: base_spec.clone(),
            };
            match hyper_init {
                HyperInit::BiasHyper => init_bias_hyper(&mut params, "mt.hyper", &spec, rng)?,
                HyperInit::Kaiming => init_kaiming(&mut params, "mt.hyper", &spec, rng)?,
            }
            Some(spec)
        } else {
            init_mlp(&mut params, "mt.mlp", &base_spec, rng)?;
            None
        };
        let critic_spec = MlpSpec::new(
            sizes.state_embed + sizes.task_proj,
            sizes.critic_hidden.clone(),
            1,
            OutputHead::ValueScalar,
        );
        init_mlp(&mut params, "mt.critic", &critic_spec, rng)?;

        Ok(MultiTaskAgent { hypernetwork, hyper_init, sizes, dims, params, base_spec, hyper_spec, critic_spec })
    }

    /// Frozen embedding row for one task.
    pub fn g_row(&self, task_index: usize) -> Result<Vec<f64>, AgentError> {
        let table = self.params.get("mt.g").expect("g table");
        if task_index >= table.rows() {
            return Err(AgentError::Incompatible(format!(
                "unknown task label {task_index} (table holds {})",
                table.rows()
            )));
        }
        Ok(table.row(task_index).to_vec())
    }

    /// Frozen embedding rows `[B, task_proj]`.
    pub fn g_rows(&self, task_indices: &[usize]) -> Result<Tensor, AgentError> {
        let rows: Result<Vec<Vec<f64>>, AgentError> =
            task_indices.iter().map(|&i| self.g_row(i)).collect();
        Ok(Tensor::from_rows(&rows?)?)
    }

    /// Base-network parameters emitted by the multi-task hypernetwork for one
    /// task, used as the BI reconstruction target (a constant).
    pub fn generated_base_params(&self, task_index: usize) -> Result<GeneratedParams, AgentError> {
        let spec = self.hyper_spec.as_ref().ok_or_else(|| {
            AgentError::Incompatible("base-net targets require the multi-task hypernetwork".into())
        })?;
        let row = self.g_row(task_index)?;
        Ok(hypernet_generate(spec, &self.params, "mt.hyper", &row)?)
    }

    /// Stacked emitted parameters `[B, phi_len]` for a batch of tasks.
    pub fn generated_base_rows(&self, task_indices: &[usize]) -> Result<Tensor, AgentError> {
        let rows: Result<Vec<Vec<f64>>, AgentError> = task_indices
            .iter()
            .map(|&i| Ok(self.generated_base_params(i)?.into_flat()))
            .collect();
        Ok(Tensor::from_rows(&rows?)?)
    }

    /// Wire the policy and critic for a batch of (observation, task) rows.
    /// Conditioning goes through the learned embedding table, so the
    /// embedding receives gradient from the RL objective.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        obs: NodeId,
        task_indices: &[usize],
    ) -> Result<(NodeId, NodeId), DiffError> {
        let table = bound.get("mt.g")?;
        let emb = g.lookup_rows(table, task_indices)?;
        let state_e = bound.affine(g, "mt.se", obs)?;
        let state_e = g.relu(state_e)?;

        let logits = match &self.hyper_spec {
            Some(spec) => {
                let (phi, _) = hypernet_forward(g, bound, "mt.hyper", spec, emb)?;
                mlp_forward_generated(g, &spec.target, phi, state_e)?
            }
            None => {
                let input = g.concat_cols(&[state_e, emb])?;
                mlp_forward(g, bound, "mt.mlp", &self.base_spec, input)?
            }
        };
        let critic_e = bound.affine(g, "mt.critic_se", obs)?;
        let critic_e = g.relu(critic_e)?;
        let critic_in = g.concat_cols(&[critic_e, emb])?;
        let value = mlp_forward(g, bound, "mt.critic", &self.critic_spec, critic_in)?;
        Ok((logits, value))
    }

    /// Batched acting step.
    pub fn act(
        &self,
        obs: &Tensor,
        task_indices: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>), AgentError> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params)?;
        let obs_n = g.input(obs.clone())?;
        let (logits, value) = self.forward(&mut g, &bound, obs_n, task_indices)?;
        let probs_n = g.row_softmax(logits)?;
        let logp_n = g.row_log_softmax(logits)?;
        let b = obs.rows();
        let probs = (0..b).map(|r| g.value(probs_n).row(r).to_vec()).collect();
        let log_probs = (0..b).map(|r| g.value(logp_n).row(r).to_vec()).collect();
        let values = (0..b).map(|r| g.value(value).row(r)[0]).collect();
        Ok((probs, log_probs, values))
    }
}

/// One archived meta-episode from the pretraining phase, stored for the "++"
/// inference-batch mixing.
#[derive(Clone, Debug)]
pub struct ArchivedMetaEpisode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Observation after the final step (for transition reconstruction).
    pub final_obs: Vec<f64>,
    pub task_index: usize,
}

/// Everything the meta phase needs from pretraining: the trained privileged
/// policy (with its embedding table and, when present, its hypernetwork) and
/// the archived trajectories.
pub struct MultiTaskArtifacts {
    pub agent: MultiTaskAgent,
    pub buffer: Vec<ArchivedMetaEpisode>,
    pub frames_consumed: u64,
    pub updates: u64,
}

/// Copy the pretrained policy into a meta agent, by value. The non-HN
/// variant copies the policy network; the HN variant copies the
/// hypernetwork instead of sharing policy parameters directly. The state
/// embedder comes along; the critic is reinitialized (left untouched).
pub fn reuse_initialize(meta: &mut MetaAgent, artifacts: &MultiTaskArtifacts) -> Result<(), AgentError> {
    let src = &artifacts.agent;
    if meta.config.hypernetwork != src.hypernetwork {
        return Err(AgentError::Incompatible(
            "multi-task policy and meta policy disagree on the hypernetwork flag".into(),
        ));
    }
    let pairs: Vec<(String, String)> = src
        .params
        .names()
        .filter_map(|name| {
            let dst = if let Some(rest) = name.strip_prefix("mt.hyper.") {
                Some(format!("pol.hyper.{rest}"))
            } else if let Some(rest) = name.strip_prefix("mt.mlp.") {
                Some(format!("pol.mlp.{rest}"))
            } else if let Some(rest) = name.strip_prefix("mt.se.") {
                Some(format!("pol.se.{rest}"))
            } else {
                None
            };
            dst.map(|d| (name.to_string(), d))
        })
        .collect();
    for (src_name, dst_name) in pairs {
        let value = src.params.get(&src_name).expect("listed name").clone();
        let dst = meta.params.get(&dst_name).ok_or_else(|| {
            AgentError::Incompatible(format!("meta agent has no parameter {dst_name}"))
        })?;
        if dst.shape() != value.shape() {
            return Err(AgentError::Incompatible(format!(
                "{src_name} {:?} does not fit {dst_name} {:?}",
                value.shape(),
                dst.shape()
            )));
        }
        meta.params.set(&dst_name, value)?;
    }
    Ok(())
}

/// Which buffer each drawn inference sample comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceSample {
    /// Index into the current meta-phase batch.
    Meta(usize),
    /// Index into the archived multi-task buffer.
    Archive(usize),
}

/// Draw the episodes J_infer trains on this round. "++" variants sample
/// uniformly over the union of the meta-phase batch and the multi-task
/// archive; plain variants use the meta-phase batch only.
pub fn inference_batch_source<R: Rng>(
    multi_phase_reuse: bool,
    meta_count: usize,
    archive_count: usize,
    draw: usize,
    rng: &mut R,
) -> Result<Vec<InferenceSample>, AgentError> {
    if !multi_phase_reuse {
        return Ok((0..meta_count.min(draw)).map(InferenceSample::Meta).collect());
    }
    if archive_count == 0 {
        return Err(AgentError::Incompatible(
            "++ variants need a non-empty multi-task buffer; run pretraining first".into(),
        ));
    }
    let total = meta_count + archive_count;
    Ok((0..draw)
        .map(|_| {
            let i = rng.gen_range(0..total);
            if i < meta_count {
                InferenceSample::Meta(i)
            } else {
                InferenceSample::Archive(i - meta_count)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::rng::{stream, Stream};

    fn dims() -> EnvDims {
        EnvDims::of(EnvKind::Grid)
    }

    #[test]
    fn equal_embeddings_give_identical_distributions() {
        let mut rng = stream(5, Stream::Init, &[]);
        let mut agent =
            MultiTaskAgent::new(Method::Multi, NetSizes::tiny(), dims(), &mut rng).unwrap();
        // Force two tasks to share an embedding row.
        let mut table = agent.params.get("mt.g").unwrap().clone();
        let proj = table.cols();
        let row: Vec<f64> = table.row(3).to_vec();
        table.data_mut()[7 * proj..8 * proj].copy_from_slice(&row);
        agent.params.set("mt.g", table).unwrap();

        let obs = Tensor::matrix(2, 2, vec![0.25, 0.5, 0.25, 0.5]).unwrap();
        let (probs, _, _) = agent.act(&obs, &[3, 7]).unwrap();
        assert_eq!(probs[0], probs[1]);
    }

    #[test]
    fn embedding_receives_gradient_from_policy_objective() {
        let mut rng = stream(6, Stream::Init, &[]);
        let agent =
            MultiTaskAgent::new(Method::Multi, NetSizes::tiny(), dims(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &agent.params).unwrap();
        let obs = g.input(Tensor::matrix(1, 2, vec![0.5, 0.75]).unwrap()).unwrap();
        let (logits, _) = agent.forward(&mut g, &bound, obs, &[4]).unwrap();
        let lp = g.row_log_softmax(logits).unwrap();
        let picked = g.gather_col(lp, &[0]).unwrap();
        let loss = g.sum_all(picked).unwrap();
        let grads = g.backward(loss).unwrap();
        let g_grad = grads.get("mt.g").unwrap();
        let row4: f64 = g_grad.row(4).iter().map(|v| v.abs()).sum();
        let row0: f64 = g_grad.row(0).iter().map(|v| v.abs()).sum();
        assert!(row4 > 0.0, "trained row must receive gradient");
        assert_eq!(row0, 0.0, "unused rows receive none");
    }

    #[test]
    fn unknown_task_label_is_rejected() {
        let mut rng = stream(7, Stream::Init, &[]);
        let agent =
            MultiTaskAgent::new(Method::Multi, NetSizes::tiny(), dims(), &mut rng).unwrap();
        assert!(agent.g_row(23).is_ok());
        assert!(agent.g_row(24).is_err());
    }

    #[test]
    fn plain_variants_use_meta_buffer_only() {
        let mut rng = stream(8, Stream::Shuffle, &[]);
        let samples = inference_batch_source(false, 4, 100, 4, &mut rng).unwrap();
        assert!(samples.iter().all(|s| matches!(s, InferenceSample::Meta(_))));
    }

    #[test]
    fn plus_plus_requires_archive() {
        let mut rng = stream(8, Stream::Shuffle, &[1]);
        assert!(inference_batch_source(true, 4, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn union_sampling_is_uniform_over_concatenated_records() {
        let mut rng = stream(8, Stream::Shuffle, &[2]);
        let (meta_n, arch_n) = (10usize, 30usize);
        let draws = 100_000;
        let samples = inference_batch_source(true, meta_n, arch_n, draws, &mut rng).unwrap();
        let meta_frac =
            samples.iter().filter(|s| matches!(s, InferenceSample::Meta(_))).count() as f64
                / draws as f64;
        let p = meta_n as f64 / (meta_n + arch_n) as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((meta_frac - p).abs() < 3.0 * se, "meta fraction {meta_frac} vs {p}");
        // Both buffers represented.
        assert!(samples.iter().any(|s| matches!(s, InferenceSample::Archive(_))));
    }
}

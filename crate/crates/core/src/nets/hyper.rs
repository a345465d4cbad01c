use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};

use super::init::{init_linear, init_mlp};
use super::mlp::{flatten_mlp_params, GeneratedParams, MlpSpec};
use super::BoundParams;

/// Hypernetwork shape: a generating MLP from the latent to the flattened
/// parameter vector of the target base network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetSpec {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub target: MlpSpec,
}

impl HypernetSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.latent);
        w.extend_from_slice(&self.hidden);
        w.push(self.target.param_count());
        w
    }
}

/// Bias-HyperInit: the final linear layer starts with a zero weight matrix
/// and a bias equal to a standard-initialized base network, so the emitted
/// base-network parameters are identical for any latent at the start of
/// training. Earlier layers use the standard init.
pub fn init_bias_hyper<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    spec: &HypernetSpec,
    rng: &mut R,
) -> Result<(), DiffError> {
    let widths = spec.widths();
    let last = widths.len() - 2;
    for i in 0..last {
        init_linear(params, &format!("{prefix}.l{i}"), widths[i], widths[i + 1], 2.0, rng)?;
    }
    params.insert(
        &format!("{prefix}.l{last}.w"),
        Tensor::zeros(widths[last], widths[last + 1]),
    )?;
    let mut base = ParamSet::new();
    init_mlp(&mut base, "base", &spec.target, rng)?;
    let flat = flatten_mlp_params(&base, "base", &spec.target)?;
    params.insert(&format!("{prefix}.l{last}.b"), Tensor::vector(flat))
}

/// Kaiming init, not designed for hypernetworks: fan-in-scaled normal for
/// every layer including the final one, zero biases.
pub fn init_kaiming<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    spec: &HypernetSpec,
    rng: &mut R,
) -> Result<(), DiffError> {
    let widths = spec.widths();
    for i in 0..widths.len() - 1 {
        init_linear(params, &format!("{prefix}.l{i}"), widths[i], widths[i + 1], 2.0, rng)?;
    }
    Ok(())
}

/// Run the generating network. Returns the emitted flat parameter rows
/// (`[B, target.param_count()]`) and the first hidden activation, which is
/// the probe point for latent-gradient measurements.
pub fn hypernet_forward(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    spec: &HypernetSpec,
    latent: NodeId,
) -> Result<(NodeId, NodeId), DiffError> {
    if g.value(latent).cols() != spec.latent {
        return Err(DiffError::BadShape {
            context: format!("hypernet_forward({prefix})"),
            detail: format!("latent width {} != {}", g.value(latent).cols(), spec.latent),
        });
    }
    let widths = spec.widths();
    let n_layers = widths.len() - 1;
    let mut h = latent;
    let mut first_hidden = None;
    for i in 0..n_layers {
        h = bound.affine(g, &format!("{prefix}.l{i}"), h)?;
        if i + 1 < n_layers {
            h = g.relu(h)?;
            if first_hidden.is_none() {
                first_hidden = Some(h);
            }
        }
    }
    // A hypernetwork with no hidden layers probes its input latent.
    Ok((h, first_hidden.unwrap_or(latent)))
}

/// Value-level generation: emit the full flat parameter vector for one latent.
pub fn hypernet_generate(
    spec: &HypernetSpec,
    params: &ParamSet,
    prefix: &str,
    latent: &[f64],
) -> Result<GeneratedParams, DiffError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params)?;
    let z = g.input(Tensor::vector(latent.to_vec()))?;
    let (phi, _) = hypernet_forward(&mut g, &bound, prefix, spec, z)?;
    GeneratedParams::from_flat(spec.target.clone(), g.value(phi).data().to_vec())
}

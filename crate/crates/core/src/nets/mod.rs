//! Network building blocks: MLP, gated recurrent cell, hypernetwork with its
//! two initializations, linear projections, and the diagonal-Gaussian
//! information bottleneck.

mod bottleneck;
mod gru;
mod hyper;
mod init;
mod mlp;

pub use bottleneck::{
    kl_node, kl_to_standard_normal, BeliefNodes, Bottleneck, LatentBelief,
};
pub use gru::{gru_step, init_gru, GruSpec};
pub use hyper::{
    hypernet_forward, hypernet_generate, init_bias_hyper, init_kaiming, HypernetSpec,
};
pub use init::{init_linear, init_mlp, orthogonal};
pub use mlp::{
    flatten_mlp_params, mlp_forward, mlp_forward_generated, GeneratedParams, LayerSlice, MlpSpec,
    OutputHead,
};

use std::collections::HashMap;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet};

/// Graph bindings for a parameter set: every named parameter declared as a
/// leaf node, looked up by name while wiring forwards.
pub struct BoundParams {
    map: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ParamSet) -> Result<Self, DiffError> {
        let mut map = HashMap::new();
        for (name, tensor) in params.iter() {
            map.insert(name.to_string(), graph.param(name, tensor)?);
        }
        Ok(BoundParams { map })
    }

    pub fn get(&self, name: &str) -> Result<NodeId, DiffError> {
        self.map.get(name).copied().ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    /// Affine layer `x @ {prefix}.w + {prefix}.b`.
    pub fn affine(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId, DiffError> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        g.affine(x, w, b)
    }
}

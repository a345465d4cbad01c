use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};

use super::BoundParams;

/// What the final layer of an MLP feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    CategoricalLogits,
    ValueScalar,
}

/// Feed-forward network shape: ReLU after each hidden layer, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub head: OutputHead,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, head: OutputHead) -> Self {
        MlpSpec { input, hidden, output, head }
    }

    /// All layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    /// Total number of scalar parameters (weights + biases).
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        (0..w.len() - 1).map(|i| w[i] * w[i + 1] + w[i + 1]).sum()
    }

    /// Flat-vector layout: per layer, the `[in, out]` row-major weight block
    /// followed by the bias block.
    pub fn layer_slices(&self) -> Vec<LayerSlice> {
        let w = self.widths();
        let mut out = Vec::with_capacity(w.len() - 1);
        let mut offset = 0;
        for i in 0..w.len() - 1 {
            out.push(LayerSlice { offset, input: w[i], output: w[i + 1] });
            offset += w[i] * w[i + 1] + w[i + 1];
        }
        out
    }
}

/// Location of one layer inside a flattened parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub offset: usize,
    pub input: usize,
    pub output: usize,
}

impl LayerSlice {
    pub fn weight_len(&self) -> usize {
        self.input * self.output
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.output
    }
}

/// Flattened weights-and-biases of a base network plus the slicing metadata
/// mapping segments back to layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedParams {
    spec: MlpSpec,
    flat: Vec<f64>,
}

impl GeneratedParams {
    pub fn from_flat(spec: MlpSpec, flat: Vec<f64>) -> Result<Self, DiffError> {
        if flat.len() != spec.param_count() {
            return Err(DiffError::BadShape {
                context: "GeneratedParams::from_flat".into(),
                detail: format!("expected {} values, got {}", spec.param_count(), flat.len()),
            });
        }
        Ok(GeneratedParams { spec, flat })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let s = self.spec.layer_slices()[layer];
        &self.flat[s.offset..s.bias_offset()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.spec.layer_slices()[layer];
        &self.flat[s.bias_offset()..s.end()]
    }

    /// Expand into named layer tensors (`l{i}.w` / `l{i}.b`).
    pub fn to_param_set(&self) -> Result<ParamSet, DiffError> {
        let mut out = ParamSet::new();
        for (i, s) in self.spec.layer_slices().iter().enumerate() {
            out.insert(
                &format!("l{i}.w"),
                Tensor::new(vec![s.input, s.output], self.weight(i).to_vec())?,
            )?;
            out.insert(&format!("l{i}.b"), Tensor::vector(self.bias(i).to_vec()))?;
        }
        Ok(out)
    }
}

/// Flatten named layer tensors (`{prefix}.l{i}.w` / `.b`) into the slice
/// layout used by [`GeneratedParams`]. Lossless round-trip with
/// [`GeneratedParams::to_param_set`].
pub fn flatten_mlp_params(
    params: &ParamSet,
    prefix: &str,
    spec: &MlpSpec,
) -> Result<Vec<f64>, DiffError> {
    let mut flat = Vec::with_capacity(spec.param_count());
    for i in 0..spec.widths().len() - 1 {
        let w = params
            .get(&format!("{prefix}.l{i}.w"))
            .ok_or_else(|| DiffError::MissingParam(format!("{prefix}.l{i}.w")))?;
        let b = params
            .get(&format!("{prefix}.l{i}.b"))
            .ok_or_else(|| DiffError::MissingParam(format!("{prefix}.l{i}.b")))?;
        flat.extend_from_slice(w.data());
        flat.extend_from_slice(b.data());
    }
    if flat.len() != spec.param_count() {
        return Err(DiffError::BadShape {
            context: format!("flatten_mlp_params({prefix})"),
            detail: format!("expected {} values, got {}", spec.param_count(), flat.len()),
        });
    }
    Ok(flat)
}

/// Forward through an MLP whose parameters live in `params` under
/// `{prefix}.l{i}.w` / `.b`.
pub fn mlp_forward(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    spec: &MlpSpec,
    x: NodeId,
) -> Result<NodeId, DiffError> {
    if g.value(x).cols() != spec.input {
        return Err(DiffError::BadShape {
            context: format!("mlp_forward({prefix})"),
            detail: format!("input width {} != spec input {}", g.value(x).cols(), spec.input),
        });
    }
    let n_layers = spec.widths().len() - 1;
    let mut h = x;
    for i in 0..n_layers {
        h = bound.affine(g, &format!("{prefix}.l{i}"), h)?;
        if i + 1 < n_layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Forward through an MLP whose parameters are rows of a generated flat
/// vector `phi` (`[B, param_count]`), one parameter vector per batch row.
pub fn mlp_forward_generated(
    g: &mut Graph,
    spec: &MlpSpec,
    phi: NodeId,
    x: NodeId,
) -> Result<NodeId, DiffError> {
    if g.value(phi).cols() != spec.param_count() {
        return Err(DiffError::BadShape {
            context: "mlp_forward_generated".into(),
            detail: format!(
                "phi width {} != param count {}",
                g.value(phi).cols(),
                spec.param_count()
            ),
        });
    }
    let slices = spec.layer_slices();
    let mut h = x;
    for (i, s) in slices.iter().enumerate() {
        h = g.generated_linear(phi, h, s.offset, s.input, s.output)?;
        if i + 1 < slices.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

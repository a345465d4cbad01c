use super::params::ParamSet;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::DiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    StopGradient(#[allow(dead_code)] NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    GatherCol(NodeId, Vec<usize>),
    LookupRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    RepeatRows(NodeId, usize),
    /// Per-row linear layer whose weights/bias live in a slice of `phi`.
    GeneratedLinear { phi: NodeId, x: NodeId, offset: usize, in_dim: usize, out_dim: usize },
}

fn op_name(op: &Op) -> String {
    match op {
        Op::Input => "input".into(),
        Op::Param(name) => format!("param({name})"),
        Op::Matmul(..) => "matmul".into(),
        Op::Add(..) => "add".into(),
        Op::AddBias(..) => "add_bias".into(),
        Op::Sub(..) => "sub".into(),
        Op::Mul(..) => "mul".into(),
        Op::MinElem(..) => "min_elem".into(),
        Op::Scale(..) => "scale".into(),
        Op::AddScalar(..) => "add_scalar".into(),
        Op::Relu(_) => "relu".into(),
        Op::Tanh(_) => "tanh".into(),
        Op::Sigmoid(_) => "sigmoid".into(),
        Op::Exp(_) => "exp".into(),
        Op::Ln(_) => "ln".into(),
        Op::Clamp(..) => "clamp".into(),
        Op::StopGradient(_) => "stop_gradient".into(),
        Op::ConcatCols(_) => "concat_cols".into(),
        Op::SliceCols(..) => "slice_cols".into(),
        Op::RowSoftmax(_) => "row_softmax".into(),
        Op::RowLogSoftmax(_) => "row_log_softmax".into(),
        Op::GatherCol(..) => "gather_col".into(),
        Op::LookupRows(..) => "lookup_rows".into(),
        Op::SumAll(_) => "sum_all".into(),
        Op::MeanAll(_) => "mean_all".into(),
        Op::RepeatRows(..) => "repeat_rows".into(),
        Op::GeneratedLinear { .. } => "generated_linear".into(),
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Dynamic computation graph: forward values are computed eagerly as ops are
/// added, and [`Graph::backward`] replays the tape in reverse for exact
/// gradients. Rebuilt per step; single-threaded per instance.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at a node by the most recent backward pass.
    pub fn node_grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                node: self.nodes.len(),
                op: op_name(&op),
                during: "forward",
            });
        }
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &str, detail: String) -> DiffError {
        DiffError::BadShape { context: format!("{op} (node {})", self.nodes.len()), detail }
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        self.push(Op::Input, value)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Input, Tensor::scalar(v))
    }

    /// Declare a named parameter leaf. Gradients for every declared parameter
    /// are reported by [`Graph::backward`], zero-filled if unreached.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId, DiffError> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let id = self.push(Op::Param(name.to_string()), value.clone())?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            let detail = format!("[{m}x{k}] @ [{k2}x{n}]");
            return Err(self.shape_err("matmul", detail));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?)
    }

    fn binary_same_shape(
        &mut self,
        op_kind: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            let detail = format!("{:?} vs {:?}", av.shape(), bv.shape());
            return Err(self.shape_err(op_kind, detail));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        self.push(op, Tensor::new(shape, data)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("min_elem", a, b, f64::min, Op::MinElem(a, b))
    }

    /// `[B,n] + [1,n]` broadcast add (bias rows).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (rows, cols) = (xv.rows(), xv.cols());
        if bv.rows() != 1 || bv.cols() != cols {
            let detail = format!("{:?} + bias {:?}", xv.shape(), bv.shape());
            return Err(self.shape_err("add_bias", detail));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (xi, bi) in xv.row(r).iter().zip(bv.data()) {
                data.push(xi + bi);
            }
        }
        self.push(Op::AddBias(x, bias), Tensor::new(vec![rows, cols], data)?)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| a * c).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Scale(x, c), Tensor::new(shape, data)?)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| a + c).collect();
        let shape = v.shape().to_vec();
        self.push(Op::AddScalar(x, c), Tensor::new(shape, data)?)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| f(a)).collect();
        let shape = v.shape().to_vec();
        self.push(op, Tensor::new(shape, data)?)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.unary(x, |a| a.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Value-transparent marker: forward is a bit-identical copy, backward
    /// contributes exactly zero through this edge.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::StopGradient(x), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                let detail = format!("row counts differ: {} vs {}", rows, v.rows());
                return Err(self.shape_err("concat_cols", detail));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![rows, cols], data)?)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        if start >= end || end > cols {
            let detail = format!("cols {start}..{end} of [{rows}x{cols}]");
            return Err(self.shape_err("slice_cols", detail));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        self.push(Op::SliceCols(x, start, end), Tensor::new(vec![rows, end - start], data)?)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&a| (a - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        self.push(Op::RowSoftmax(x), Tensor::new(vec![rows, cols], data)?)
    }

    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln() + max;
            data.extend(row.iter().map(|&a| a - log_sum));
        }
        self.push(Op::RowLogSoftmax(x), Tensor::new(vec![rows, cols], data)?)
    }

    /// Select one column per row: `out[r] = x[r, idx[r]]`, shape `[rows, 1]`.
    pub fn gather_col(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        if idx.len() != rows {
            let detail = format!("{} indices for {rows} rows", idx.len());
            return Err(self.shape_err("gather_col", detail));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(self.shape_err("gather_col", format!("index {bad} >= {cols}")));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| v.row(r)[i]).collect();
        self.push(Op::GatherCol(x, idx.to_vec()), Tensor::new(vec![rows, 1], data)?)
    }

    /// Select rows of a table: `out[r, :] = table[idx[r], :]`.
    pub fn lookup_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId, DiffError> {
        let v = &self.nodes[table.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err("lookup_rows", format!("row {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        self.push(Op::LookupRows(table, idx.to_vec()), Tensor::new(vec![idx.len(), cols], data)?)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    /// Stack `k` copies of `x` vertically: `[B,n] -> [k*B,n]`.
    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId, DiffError> {
        if k == 0 {
            return Err(self.shape_err("repeat_rows", "k must be >= 1".into()));
        }
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(k * rows * cols);
        for _ in 0..k {
            data.extend_from_slice(v.data());
        }
        self.push(Op::RepeatRows(x, k), Tensor::new(vec![k * rows, cols], data)?)
    }

    /// Affine layer: `x @ w + bias`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, bias)
    }

    /// Per-row linear layer with weights generated by a hypernetwork.
    ///
    /// `phi` is `[B, >=offset+in*out+out]`; row `b` holds a weight block laid
    /// out as `[in_dim, out_dim]` row-major at `offset`, then `out_dim` bias
    /// values. `x` is `[B, in_dim]`; the output is `[B, out_dim]` with
    /// `y[b] = x[b] @ W[b] + bias[b]`.
    pub fn generated_linear(
        &mut self,
        phi: NodeId,
        x: NodeId,
        offset: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<NodeId, DiffError> {
        let (pv, xv) = (&self.nodes[phi.0].value, &self.nodes[x.0].value);
        let rows = xv.rows();
        let needed = offset + in_dim * out_dim + out_dim;
        if pv.rows() != rows || pv.cols() < needed || xv.cols() != in_dim {
            let detail = format!(
                "phi {:?}, x {:?}, offset {offset}, in {in_dim}, out {out_dim}",
                pv.shape(),
                xv.shape()
            );
            return Err(self.shape_err("generated_linear", detail));
        }
        let mut data = vec![0.0; rows * out_dim];
        for b in 0..rows {
            let p = pv.row(b);
            let w = &p[offset..offset + in_dim * out_dim];
            let bias = &p[offset + in_dim * out_dim..needed];
            let y = &mut data[b * out_dim..(b + 1) * out_dim];
            y.copy_from_slice(bias);
            for (i, &xi) in xv.row(b).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let w_row = &w[i * out_dim..(i + 1) * out_dim];
                for (yo, &wv) in y.iter_mut().zip(w_row) {
                    *yo += xi * wv;
                }
            }
        }
        let op = Op::GeneratedLinear { phi, x, offset, in_dim, out_dim };
        self.push(op, Tensor::new(vec![rows, out_dim], data)?)
    }

    /// Reverse-mode pass from a scalar node. Returns one gradient tensor per
    /// declared parameter (zeros where no gradient flowed), keyed and shaped
    /// exactly like the declared parameters. Accumulation order is the fixed
    /// reverse tape order, so results are deterministic. May be called more
    /// than once on the same graph (e.g. probing one loss term, then
    /// training on the total); each call resets all node gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<ParamSet, DiffError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(DiffError::NonScalarOutput(self.nodes[root.0].value.shape().to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(grad) = self.grads[i].take() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffError::NonFinite {
                    node: i,
                    op: op_name(&self.nodes[i].op),
                    during: "backward",
                });
            }
            propagate(&self.nodes, &mut self.grads, i, &grad);
            self.grads[i] = Some(grad);
        }

        let mut out = ParamSet::new();
        for (name, id) in &self.params {
            let shape = self.nodes[id.0].value.shape().to_vec();
            let data = match &self.grads[id.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[id.0].value.numel()],
            };
            out.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(out)
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
) -> &'a mut Vec<f64> {
    let n = nodes[id.0].value.numel();
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, grad: &[f64]) {
    match &nodes[i].op {
        Op::Input | Op::Param(_) | Op::StopGradient(_) => {}
        Op::Matmul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            matmul_bt_acc(grad, bv.data(), slot(grads, nodes, *a), m, n, k);
            matmul_at_acc(av.data(), grad, slot(grads, nodes, *b), m, k, n);
        }
        Op::Add(a, b) => {
            add_into(slot(grads, nodes, *a), grad);
            add_into(slot(grads, nodes, *b), grad);
        }
        Op::AddBias(x, bias) => {
            add_into(slot(grads, nodes, *x), grad);
            let cols = nodes[bias.0].value.cols();
            let s = slot(grads, nodes, *bias);
            for (j, g) in grad.iter().enumerate() {
                s[j % cols] += g;
            }
        }
        Op::Sub(a, b) => {
            add_into(slot(grads, nodes, *a), grad);
            let s = slot(grads, nodes, *b);
            for (d, g) in s.iter_mut().zip(grad) {
                *d -= g;
            }
        }
        Op::Mul(a, b) => {
            {
                let bv = nodes[b.0].value.data();
                let s = slot(grads, nodes, *a);
                for ((d, g), &v) in s.iter_mut().zip(grad).zip(bv) {
                    *d += g * v;
                }
            }
            let av = nodes[a.0].value.data();
            let s = slot(grads, nodes, *b);
            for ((d, g), &v) in s.iter_mut().zip(grad).zip(av) {
                *d += g * v;
            }
        }
        Op::MinElem(a, b) => {
            // Ties route to the first operand, deterministically.
            {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let s = slot(grads, nodes, *a);
                for (j, (d, g)) in s.iter_mut().zip(grad).enumerate() {
                    if av[j] <= bv[j] {
                        *d += g;
                    }
                }
            }
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let s = slot(grads, nodes, *b);
            for (j, (d, g)) in s.iter_mut().zip(grad).enumerate() {
                if av[j] > bv[j] {
                    *d += g;
                }
            }
        }
        Op::Scale(x, c) => {
            let s = slot(grads, nodes, *x);
            for (d, g) in s.iter_mut().zip(grad) {
                *d += c * g;
            }
        }
        Op::AddScalar(x, _) => add_into(slot(grads, nodes, *x), grad),
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &v) in s.iter_mut().zip(grad).zip(xv) {
                if v > 0.0 {
                    *d += g;
                }
            }
        }
        Op::Tanh(x) => {
            let yv = nodes[i].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &y) in s.iter_mut().zip(grad).zip(yv) {
                *d += g * (1.0 - y * y);
            }
        }
        Op::Sigmoid(x) => {
            let yv = nodes[i].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &y) in s.iter_mut().zip(grad).zip(yv) {
                *d += g * y * (1.0 - y);
            }
        }
        Op::Exp(x) => {
            let yv = nodes[i].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &y) in s.iter_mut().zip(grad).zip(yv) {
                *d += g * y;
            }
        }
        Op::Ln(x) => {
            let xv = nodes[x.0].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &v) in s.iter_mut().zip(grad).zip(xv) {
                *d += g / v;
            }
        }
        Op::Clamp(x, lo, hi) => {
            let xv = nodes[x.0].value.data();
            let s = slot(grads, nodes, *x);
            for ((d, g), &v) in s.iter_mut().zip(grad).zip(xv) {
                if v >= *lo && v <= *hi {
                    *d += g;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = nodes[i].value.rows();
            let total = nodes[i].value.cols();
            let mut start = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                let s = slot(grads, nodes, *p);
                for r in 0..rows {
                    let src = &grad[r * total + start..r * total + start + w];
                    add_into(&mut s[r * w..(r + 1) * w], src);
                }
                start += w;
            }
        }
        Op::SliceCols(x, start, end) => {
            let cols = nodes[x.0].value.cols();
            let rows = nodes[x.0].value.rows();
            let w = end - start;
            let s = slot(grads, nodes, *x);
            for r in 0..rows {
                let dst = &mut s[r * cols + start..r * cols + end];
                add_into(dst, &grad[r * w..(r + 1) * w]);
            }
        }
        Op::RowSoftmax(x) => {
            let yv = &nodes[i].value;
            let (rows, cols) = (yv.rows(), yv.cols());
            let s = slot(grads, nodes, *x);
            for r in 0..rows {
                let y = yv.row(r);
                let g = &grad[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                let dst = &mut s[r * cols..(r + 1) * cols];
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                    *d += yi * (gi - dot);
                }
            }
        }
        Op::RowLogSoftmax(x) => {
            let yv = &nodes[i].value;
            let (rows, cols) = (yv.rows(), yv.cols());
            let s = slot(grads, nodes, *x);
            for r in 0..rows {
                let y = yv.row(r);
                let g = &grad[r * cols..(r + 1) * cols];
                let gsum: f64 = g.iter().sum();
                let dst = &mut s[r * cols..(r + 1) * cols];
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                    *d += gi - yi.exp() * gsum;
                }
            }
        }
        Op::GatherCol(x, idx) => {
            let cols = nodes[x.0].value.cols();
            let s = slot(grads, nodes, *x);
            for (r, &c) in idx.iter().enumerate() {
                s[r * cols + c] += grad[r];
            }
        }
        Op::LookupRows(table, idx) => {
            let cols = nodes[table.0].value.cols();
            let s = slot(grads, nodes, *table);
            for (r, &row) in idx.iter().enumerate() {
                let src = &grad[r * cols..(r + 1) * cols];
                add_into(&mut s[row * cols..(row + 1) * cols], src);
            }
        }
        Op::SumAll(x) => {
            let g = grad[0];
            let s = slot(grads, nodes, *x);
            for d in s.iter_mut() {
                *d += g;
            }
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.numel() as f64;
            let g = grad[0] / n;
            let s = slot(grads, nodes, *x);
            for d in s.iter_mut() {
                *d += g;
            }
        }
        Op::RepeatRows(x, k) => {
            let numel = nodes[x.0].value.numel();
            let s = slot(grads, nodes, *x);
            for block in 0..*k {
                add_into(s, &grad[block * numel..(block + 1) * numel]);
            }
        }
        Op::GeneratedLinear { phi, x, offset, in_dim, out_dim } => {
            let (offset, in_dim, out_dim) = (*offset, *in_dim, *out_dim);
            let pv = &nodes[phi.0].value;
            let xv = &nodes[x.0].value;
            let rows = xv.rows();
            let pcols = pv.cols();
            {
                let s = slot(grads, nodes, *x);
                for b in 0..rows {
                    let w = &pv.row(b)[offset..offset + in_dim * out_dim];
                    let g = &grad[b * out_dim..(b + 1) * out_dim];
                    let dx = &mut s[b * in_dim..(b + 1) * in_dim];
                    for (iidx, dxi) in dx.iter_mut().enumerate() {
                        let w_row = &w[iidx * out_dim..(iidx + 1) * out_dim];
                        let mut acc = 0.0;
                        for (&wv, &gv) in w_row.iter().zip(g) {
                            acc += wv * gv;
                        }
                        *dxi += acc;
                    }
                }
            }
            let s = slot(grads, nodes, *phi);
            for b in 0..rows {
                let g = &grad[b * out_dim..(b + 1) * out_dim];
                let xrow = xv.row(b);
                let base = b * pcols + offset;
                for (iidx, &xi) in xrow.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let dw_row = &mut s[base + iidx * out_dim..base + (iidx + 1) * out_dim];
                    for (dwi, &gv) in dw_row.iter_mut().zip(g) {
                        *dwi += xi * gv;
                    }
                }
                let db = &mut s[base + in_dim * out_dim..base + in_dim * out_dim + out_dim];
                add_into(db, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn grad_of_square() {
        // d(x*x)/dx at x=3 is 6.
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_linear_sum() {
        // d(sum(v @ W))/dW for v=[1,1] is a matrix of ones.
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let w = g.param("w", &Tensor::matrix(2, 3, vec![0.5; 6]).unwrap()).unwrap();
        let y = g.matmul(v, w).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn stop_gradient_blocks_backward_but_not_forward() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(2.0)).unwrap();
        let w = g.param("w", &Tensor::scalar(5.0)).unwrap();
        let xs = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(xs).data(), g.value(x).data());
        let y = g.mul(xs, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0]);
        assert_eq!(grads.get("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(DiffError::NonScalarOutput(_))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn log_softmax_grad_matches_softmax_identity() {
        // For loss = -logsoftmax(x)[0], dx = softmax(x) - onehot(0).
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
        let ls = g.row_log_softmax(x).unwrap();
        let picked = g.gather_col(ls, &[0]).unwrap();
        let s = g.sum_all(picked).unwrap();
        let neg = g.scale(s, -1.0).unwrap();
        let grads = g.backward(neg).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
        let sm = g2.row_softmax(x2).unwrap();
        let p = g2.value(sm).data().to_vec();
        let got = grads.get("x").unwrap().data();
        for j in 0..3 {
            let want = p[j] - if j == 0 { 1.0 } else { 0.0 };
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_linear_matches_explicit_computation() {
        let in_dim = 3;
        let out_dim = 2;
        let phi_cols = in_dim * out_dim + out_dim;
        let mut phi_data = Vec::new();
        for b in 0..2 {
            for i in 0..in_dim * out_dim {
                phi_data.push((b + 1) as f64 * 0.1 * (i as f64 + 1.0));
            }
            phi_data.push(0.5 * (b + 1) as f64);
            phi_data.push(-0.25);
        }
        let x_data = vec![1.0, -2.0, 0.5, 0.0, 1.0, 2.0];

        let mut g = Graph::new();
        let phi = g.param("phi", &Tensor::matrix(2, phi_cols, phi_data.clone()).unwrap()).unwrap();
        let x = g.param("x", &Tensor::matrix(2, in_dim, x_data.clone()).unwrap()).unwrap();
        let y = g.generated_linear(phi, x, 0, in_dim, out_dim).unwrap();
        for b in 0..2 {
            for o in 0..out_dim {
                let w = &phi_data[b * phi_cols..b * phi_cols + in_dim * out_dim];
                let bias = phi_data[b * phi_cols + in_dim * out_dim + o];
                let want: f64 = (0..in_dim)
                    .map(|i| x_data[b * in_dim + i] * w[i * out_dim + o])
                    .sum::<f64>()
                    + bias;
                assert!((g.value(y).row(b)[o] - want).abs() < 1e-12);
            }
        }
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("phi").unwrap().shape(), &[2, phi_cols]);
        assert_eq!(grads.get("x").unwrap().shape(), &[2, in_dim]);
    }

    #[test]
    fn unused_param_gets_zero_grad_with_same_shape() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(1.0)).unwrap();
        let _unused = g.param("w", &Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().shape(), &[2, 2]);
        assert_eq!(grads.get("w").unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn nonfinite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0])).unwrap();
        let err = g.ln(x).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { during: "forward", .. }));
    }

    #[test]
    fn repeat_rows_sums_gradient_blocks() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = g.repeat_rows(x, 3).unwrap();
        assert_eq!(g.value(r).shape(), &[3, 2]);
        let w = g.input(Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap()).unwrap();
        let prod = g.mul(r, w).unwrap();
        let s = g.sum_all(prod).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::new();
        g.param("w", &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            g.param("w", &Tensor::scalar(2.0)),
            Err(DiffError::DuplicateParam(_))
        ));
    }
}

use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};

use super::init::orthogonal;
use super::BoundParams;

/// Single gated recurrent layer. The hidden state is reset to zeros at
/// meta-episode start only, never at inner-episode boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruSpec {
    pub input: usize,
    pub hidden: usize,
}

/// Gate weights are fused along the column axis in `[r | z | n]` order:
/// `{prefix}.wx` is `[input, 3*hidden]`, `{prefix}.wh` is `[hidden, 3*hidden]`.
pub fn init_gru<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    spec: &GruSpec,
    rng: &mut R,
) -> Result<(), DiffError> {
    let (inp, h) = (spec.input, spec.hidden);
    let std = (1.0 / inp as f64).sqrt();
    params.insert(&format!("{prefix}.wx"), Tensor::randn(inp, 3 * h, std, rng))?;
    // Orthogonal recurrent weights, one square block per gate.
    let mut wh = vec![0.0; h * 3 * h];
    for gate in 0..3 {
        let q = orthogonal(h, rng);
        for r in 0..h {
            for c in 0..h {
                wh[r * 3 * h + gate * h + c] = q.row(r)[c];
            }
        }
    }
    params.insert(&format!("{prefix}.wh"), Tensor::new(vec![h, 3 * h], wh)?)?;
    params.insert(&format!("{prefix}.bx"), Tensor::zeros(1, 3 * h))?;
    params.insert(&format!("{prefix}.bh"), Tensor::zeros(1, 3 * h))?;
    Ok(())
}

/// One recurrent update:
/// ```text
/// r  = sigmoid(x Wxr + bxr + h Whr + bhr)
/// z  = sigmoid(x Wxz + bxz + h Whz + bhz)
/// n  = tanh(x Wxn + bxn + r * (h Whn + bhn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_step(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    spec: &GruSpec,
    state: NodeId,
    x: NodeId,
) -> Result<NodeId, DiffError> {
    let h = spec.hidden;
    let wx = bound.get(&format!("{prefix}.wx"))?;
    let wh = bound.get(&format!("{prefix}.wh"))?;
    let bx = bound.get(&format!("{prefix}.bx"))?;
    let bh = bound.get(&format!("{prefix}.bh"))?;

    let xg = g.matmul(x, wx)?;
    let xg = g.add_bias(xg, bx)?;
    let hg = g.matmul(state, wh)?;
    let hg = g.add_bias(hg, bh)?;

    let xr = g.slice_cols(xg, 0, h)?;
    let xz = g.slice_cols(xg, h, 2 * h)?;
    let xn = g.slice_cols(xg, 2 * h, 3 * h)?;
    let hr = g.slice_cols(hg, 0, h)?;
    let hz = g.slice_cols(hg, h, 2 * h)?;
    let hn = g.slice_cols(hg, 2 * h, 3 * h)?;

    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;
    let gated = g.mul(r, hn)?;
    let n = g.add(xn, gated)?;
    let n = g.tanh(n)?;

    // h' = n + z * (h - n)
    let diff = g.sub(state, n)?;
    let scaled = g.mul(z, diff)?;
    g.add(n, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64, spec: &GruSpec) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        init_gru(&mut p, "gru", spec, &mut rng).unwrap();
        p
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let spec = GruSpec { input: 3, hidden: 4 };
        let mut p = ParamSet::new();
        p.insert("gru.wx", Tensor::zeros(3, 12)).unwrap();
        p.insert("gru.wh", Tensor::zeros(4, 12)).unwrap();
        p.insert("gru.bx", Tensor::zeros(1, 12)).unwrap();
        p.insert("gru.bh", Tensor::zeros(1, 12)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p).unwrap();
        let h0 = g.input(Tensor::zeros(1, 4)).unwrap();
        let x = g.input(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let h1 = gru_step(&mut g, &bound, "gru", &spec, h0, x).unwrap();
        assert_eq!(g.value(h1).data(), &[0.0; 4]);
    }

    #[test]
    fn deterministic_and_bounded() {
        let spec = GruSpec { input: 3, hidden: 5 };
        let p = build(2, &spec);
        let run = || {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &p).unwrap();
            let mut h = g.input(Tensor::zeros(2, 5)).unwrap();
            for t in 0..7 {
                let x = g
                    .input(Tensor::matrix(2, 3, vec![0.3 * t as f64, -1.0, 0.5, 1.0, 0.0, -0.2]).unwrap())
                    .unwrap();
                h = gru_step(&mut g, &bound, "gru", &spec, h, x).unwrap();
            }
            g.value(h).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 1.0), "state escaped (-1, 1): {a:?}");
    }
}

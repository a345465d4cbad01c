use rand::Rng;

use crate::diffcore::{DiffError, ParamSet, Tensor};

use super::mlp::MlpSpec;

/// Fan-in-scaled normal init for an affine layer: weight `[fan_in, fan_out]`
/// with std `sqrt(gain / fan_in)`, zero bias. Entries are named
/// `{prefix}.w` and `{prefix}.b`.
pub fn init_linear<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Result<(), DiffError> {
    let std = (gain / fan_in as f64).sqrt();
    params.insert(&format!("{prefix}.w"), Tensor::randn(fan_in, fan_out, std, rng))?;
    params.insert(&format!("{prefix}.b"), Tensor::zeros(1, fan_out))
}

/// Standard policy-style MLP init: gain 2 (ReLU) for hidden layers, gain 1
/// for the output layer. Layer entries are `{prefix}.w{i}` / `{prefix}.b{i}`.
pub fn init_mlp<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut R,
) -> Result<(), DiffError> {
    let widths = spec.widths();
    for i in 0..widths.len() - 1 {
        let gain = if i + 2 == widths.len() { 1.0 } else { 2.0 };
        init_linear(params, &format!("{prefix}.l{i}"), widths[i], widths[i + 1], gain, rng)?;
    }
    Ok(())
}

/// Random orthogonal matrix `[n, n]` via Gram-Schmidt on a Gaussian sample.
pub fn orthogonal<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let raw = Tensor::randn(n, n, 1.0, rng);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|r| raw.row(r).to_vec()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (v, &u) in tail[0].iter_mut().zip(&head[j]) {
                    *v -= dot * u;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            let data: Vec<f64> = rows.into_iter().flatten().collect();
            return Tensor::new(vec![n, n], data).expect("square matrix");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(8, &mut rng);
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "q[{i}].q[{j}] = {dot}");
            }
        }
    }

    #[test]
    fn linear_init_shapes_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        init_linear(&mut p, "proj", 6, 4, 1.0, &mut rng).unwrap();
        assert_eq!(p.get("proj.w").unwrap().shape(), &[6, 4]);
        assert_eq!(p.get("proj.b").unwrap().data(), &[0.0; 4]);
    }
}

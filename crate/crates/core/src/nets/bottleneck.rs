use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet};

use super::init::init_linear;
use super::BoundParams;

/// Diagonal-Gaussian information bottleneck over the trajectory encoding.
///
/// `sigma` is parameterized as `exp(log-sigma head)` so it stays strictly
/// positive. The projection feeding the policy consumes a stop-gradient of
/// `(mu, sigma)`, so the encoder is trained only by the inference objectives.
#[derive(Clone, Copy, Debug)]
pub struct Bottleneck {
    pub encoder_width: usize,
    pub latent_dim: usize,
    /// Width of the projected policy input; 25 by default.
    pub projection: usize,
}

impl Bottleneck {
    pub fn init<R: Rng>(
        &self,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut R,
    ) -> Result<(), DiffError> {
        init_linear(params, &format!("{prefix}.p_mu"), self.encoder_width, self.latent_dim, 1.0, rng)?;
        init_linear(params, &format!("{prefix}.p_sigma"), self.encoder_width, self.latent_dim, 1.0, rng)?;
        init_linear(params, &format!("{prefix}.p_phi"), 2 * self.latent_dim, self.projection, 1.0, rng)
    }

    /// Forward: `mu = P_mu(h)`, `sigma = exp(P_sigma(h))`,
    /// `z = mu + sigma * noise`, `phi_input = ReLU(P_phi stopgrad(mu, sigma))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        prefix: &str,
        rnn_out: NodeId,
        noise: NodeId,
    ) -> Result<BeliefNodes, DiffError> {
        let mu = bound.affine(g, &format!("{prefix}.p_mu"), rnn_out)?;
        let log_sigma = bound.affine(g, &format!("{prefix}.p_sigma"), rnn_out)?;
        let sigma = g.exp(log_sigma)?;
        let scaled = g.mul(sigma, noise)?;
        let z = g.add(mu, scaled)?;
        let stats = g.concat_cols(&[mu, sigma])?;
        let frozen = g.stop_gradient(stats)?;
        let projected = bound.affine(g, &format!("{prefix}.p_phi"), frozen)?;
        let phi_input = g.relu(projected)?;
        Ok(BeliefNodes { mu, log_sigma, sigma, z, phi_input })
    }
}

/// Graph nodes of one bottleneck evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BeliefNodes {
    pub mu: NodeId,
    pub log_sigma: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
    pub phi_input: NodeId,
}

/// Value-level belief (one row per environment).
#[derive(Clone, Debug)]
pub struct LatentBelief {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub phi_input: Vec<f64>,
}

/// KL(N(mu, sigma) || N(0, I)) = 0.5 * sum(sigma^2 + mu^2 - 1 - ln sigma^2).
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> Result<f64, DiffError> {
    if mu.len() != sigma.len() {
        return Err(DiffError::InvalidArgument(format!(
            "mu and sigma lengths differ: {} vs {}",
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(bad) = sigma.iter().find(|&&s| s <= 0.0) {
        return Err(DiffError::InvalidArgument(format!("sigma must be > 0, got {bad}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0 - (s * s).ln()))
        .sum())
}

/// Graph version over `[B, latent]` mu / log-sigma rows: per-row KL summed
/// over latent dims, averaged over the batch.
pub fn kl_node(g: &mut Graph, mu: NodeId, log_sigma: NodeId) -> Result<NodeId, DiffError> {
    let rows = g.value(mu).rows() as f64;
    let two_l = g.scale(log_sigma, 2.0)?;
    let var = g.exp(two_l)?;
    let mu_sq = g.mul(mu, mu)?;
    let sum = g.add(var, mu_sq)?;
    let sum = g.sub(sum, two_l)?;
    let sum = g.add_scalar(sum, -1.0)?;
    let total = g.sum_all(sum)?;
    g.scale(total, 0.5 / rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_zero_at_standard_normal() {
        assert_eq!(kl_to_standard_normal(&[0.0; 7], &[1.0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form_values() {
        let v = kl_to_standard_normal(&[1.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = kl_to_standard_normal(&[0.0], &[2.0]).unwrap();
        let want = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.8068528194400547).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        assert!(kl_to_standard_normal(&[0.0], &[0.0]).is_err());
        assert!(kl_to_standard_normal(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_node_matches_value_level() {
        let mu = [0.3, -1.1, 0.0];
        let log_sigma = [0.2f64, -0.5, 0.0];
        let sigma: Vec<f64> = log_sigma.iter().map(|l| l.exp()).collect();
        let want = kl_to_standard_normal(&mu, &sigma).unwrap();
        let mut g = Graph::new();
        let m = g.input(Tensor::vector(mu.to_vec())).unwrap();
        let l = g.input(Tensor::vector(log_sigma.to_vec())).unwrap();
        let kl = kl_node(&mut g, m, l).unwrap();
        assert!((g.value(kl).item() - want).abs() < 1e-12);
    }

    fn setup() -> (Bottleneck, ParamSet) {
        let b = Bottleneck { encoder_width: 6, latent_dim: 3, projection: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = ParamSet::new();
        b.init(&mut p, "bot", &mut rng).unwrap();
        (b, p)
    }

    #[test]
    fn zero_noise_gives_z_equal_mu() {
        let (b, p) = setup();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p).unwrap();
        let h = g.input(Tensor::vector(vec![0.5, -0.2, 0.9, 0.0, 1.0, -1.0])).unwrap();
        let noise = g.input(Tensor::zeros(1, 3)).unwrap();
        let nodes = b.forward(&mut g, &bound, "bot", h, noise).unwrap();
        assert_eq!(g.value(nodes.z).data(), g.value(nodes.mu).data());
    }

    #[test]
    fn sigma_strictly_positive() {
        let (b, p) = setup();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p).unwrap();
        let h = g.input(Tensor::vector(vec![-3.0, 5.0, 0.1, -0.7, 2.2, -9.0])).unwrap();
        let noise = g.input(Tensor::zeros(1, 3)).unwrap();
        let nodes = b.forward(&mut g, &bound, "bot", h, noise).unwrap();
        assert!(g.value(nodes.sigma).data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn policy_path_gradient_does_not_reach_mu_sigma_heads() {
        let (b, p) = setup();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p).unwrap();
        let h = g.param("h", &Tensor::vector(vec![0.5, -0.2, 0.9, 0.0, 1.0, -1.0])).unwrap();
        let noise = g.input(Tensor::zeros(1, 3)).unwrap();
        let nodes = b.forward(&mut g, &bound, "bot", h, noise).unwrap();
        let loss = g.sum_all(nodes.phi_input).unwrap();
        let grads = g.backward(loss).unwrap();
        // The stop-gradient cuts the path into the heads and the encoder.
        assert_eq!(grads.get("bot.p_mu.w").unwrap().data().iter().sum::<f64>(), 0.0);
        assert_eq!(grads.get("bot.p_sigma.w").unwrap().data().iter().sum::<f64>(), 0.0);
        assert_eq!(grads.get("h").unwrap().data(), &[0.0; 6]);
        // P_phi itself is on the policy path and must receive gradient.
        let p_phi: f64 = grads.get("bot.p_phi.w").unwrap().data().iter().map(|v| v.abs()).sum();
        assert!(p_phi > 0.0);
    }

    #[test]
    fn reparameterized_moments_match_mu_sigma() {
        let (b, p) = setup();
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::vector(vec![0.5, -0.2, 0.9, 0.0, 1.0, -1.0]);

        // Reference mu/sigma from a zero-noise pass.
        let (mu, sigma) = {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &p).unwrap();
            let hid = g.input(h.clone()).unwrap();
            let noise = g.input(Tensor::zeros(1, 3)).unwrap();
            let nodes = b.forward(&mut g, &bound, "bot", hid, noise).unwrap();
            (g.value(nodes.mu).data().to_vec(), g.value(nodes.sigma).data().to_vec())
        };

        let mut mean = vec![0.0; 3];
        let mut m2 = vec![0.0; 3];
        for i in 0..draws {
            let eps: Vec<f64> =
                (0..3).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let z: Vec<f64> =
                (0..3).map(|j| mu[j] + sigma[j] * eps[j]).collect();
            for j in 0..3 {
                let delta = z[j] - mean[j];
                mean[j] += delta / (i + 1) as f64;
                m2[j] += delta * (z[j] - mean[j]);
            }
        }
        for j in 0..3 {
            let se_mean = sigma[j] / (draws as f64).sqrt();
            assert!((mean[j] - mu[j]).abs() < 3.0 * se_mean, "mean[{j}]");
            let emp_std = (m2[j] / (draws - 1) as f64).sqrt();
            // std of the sample std is roughly sigma / sqrt(2n)
            let se_std = sigma[j] / (2.0 * draws as f64).sqrt();
            assert!((emp_std - sigma[j]).abs() < 3.0 * se_std, "std[{j}]");
        }
    }
}

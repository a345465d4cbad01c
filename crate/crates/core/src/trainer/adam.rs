use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, ParamSet};

/// Adam over a named subset of parameters. Moments are keyed by parameter
/// name; update order follows the caller's name list, so steps are
/// deterministic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-5, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one step to the listed parameters.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        names: &[String],
        lr: f64,
    ) -> Result<(), DiffError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in names {
            let g = grads
                .get(name)
                .ok_or_else(|| DiffError::MissingParam(name.clone()))?
                .data();
            let p = params
                .get_mut(name)
                .ok_or_else(|| DiffError::MissingParam(name.clone()))?;
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// The two optimizers of the dual-rate scheme: policy-path parameters at the
/// swept learning rate, task-inference parameters at their own fixed rate.
/// Disjoint name sets make isolation structural.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DualAdam {
    pub policy: Adam,
    pub inference: Adam,
}

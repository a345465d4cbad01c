/// Generalized advantage estimation over one sequence.
///
/// ```text
/// delta_t = r_t + gamma * V_{t+1} * (1 - metadone_t) - V_t
/// A_t     = delta_t + gamma * lambda * (1 - metadone_t) * A_{t+1}
/// ```
/// with `V_T = bootstrap`. Only meta-episode boundaries truncate; inner
/// episode resets do not. Returns `(advantages, returns)` with
/// `returns = A + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    meta_dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), meta_dones.len());
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_adv = 0.0;
    for t in (0..t_len).rev() {
        let mask = if meta_dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == t_len { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        next_adv = delta + gamma * lambda * mask * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Normalize in place to zero mean, unit standard deviation (population).
/// A zero-variance batch normalizes to all zeros, so the policy-gradient
/// term vanishes instead of dividing by zero.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        adv.iter_mut().for_each(|a| *a = 0.0);
    } else {
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

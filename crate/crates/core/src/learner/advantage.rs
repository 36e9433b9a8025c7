//! Advantage estimation for the reward and cost channels.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    /// Generalized advantage estimation.
    Gae,
    /// Discounted forward sum minus the value baseline.
    Mc,
}

/// Discounted forward sums `G_t = sum_{i>=t} gamma^(i-t) r_i` of one complete episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Monte-Carlo advantages `G_t - V(s_t)`; returns `(advantages, G)`.
pub fn mc_advantages(rewards: &[f64], values: &[f64], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let g = discounted_returns(rewards, gamma);
    let adv = g.iter().zip(values).map(|(g, v)| g - v).collect();
    (adv, g)
}

/// GAE over one complete episode (the value after the last step is zero).
/// Returns `(advantages, advantages + values)`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
/// A constant input becomes all zeros.
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

/// Elementwise `a_r - lambda a_c`.
pub fn lagrangian_advantage(adv_r: &[f64], adv_c: &[f64], lambda: f64) -> Vec<f64> {
    adv_r.iter().zip(adv_c).map(|(r, c)| r - lambda * c).collect()
}

//! Clipped-surrogate actor loss, critic regression and the minibatch update.

use super::advantage::lagrangian_advantage;
use super::policy::{CriticKind, Model, ParamGroup};
use super::rollout::RolloutBuffer;
use super::LearnerError;
use crate::diffcore::{Adam, DiffError, Graph, Grads, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Log-ratios beyond this magnitude are clamped (and counted as skipped).
pub const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticMode {
    /// Reward critic on reward returns, cost critic on cost returns.
    DualCritic,
    /// Additionally fits a combined head to `r - lambda c` returns.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Gradient-norm clip, applied separately to the reward path and to each cost-side head.
    pub max_grad_norm: f64,
    pub critic_mode: CriticMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            critic_mode: CriticMode::DualCritic,
        }
    }
}

/// `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

fn column(values: &[f64]) -> Tensor {
    Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
}

/// `-mean(min(rho A, clip(rho) A))` with `rho = exp(logp_new - logp_old)`.
pub fn surrogate_loss(g: &mut Graph<'_>, logp_new: Var, logp_old: &[f64], adv: &[f64], eps: f64) -> Var {
    let old = g.input(column(logp_old));
    let diff = g.sub(logp_new, old);
    let diff = g.clamp(diff, -MAX_LOG_RATIO, MAX_LOG_RATIO);
    let ratio = g.exp(diff);
    let a = Arc::new(column(adv));
    let unclipped = g.mul_const(ratio, a.clone());
    let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.mul_const(clipped, a);
    let obj = g.minimum(unclipped, clipped);
    let m = g.mean(obj);
    g.scale(m, -1.0)
}

/// `-mean(logp A)`, the unclipped score-function estimator.
pub fn vanilla_pg_loss(g: &mut Graph<'_>, logp_new: Var, adv: &[f64]) -> Var {
    let weighted = g.mul_const(logp_new, Arc::new(column(adv)));
    let m = g.mean(weighted);
    g.scale(m, -1.0)
}

/// `mean((v - target)^2)`.
pub fn value_loss(g: &mut Graph<'_>, values: Var, targets: &[f64]) -> Var {
    let t = g.input(column(targets));
    let d = g.sub(values, t);
    let sq = g.square(d);
    g.mean(sq)
}

/// Scalar pieces of one minibatch loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub actor: f64,
    pub critic_r: f64,
    pub critic_c: f64,
    pub critic_l: f64,
    pub entropy: f64,
    /// Transitions whose log-ratio hit the clamp.
    pub skipped: usize,
}

/// Builds the combined loss over `items`; returns the loss node and its parts.
pub fn minibatch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    buffer: &RolloutBuffer,
    items: &[(usize, usize)],
    lambda: f64,
    cost_channel: bool,
    cfg: &PpoConfig,
) -> Result<(Var, LossValues), LearnerError> {
    if !buffer.advantages_ready {
        return Err(LearnerError::Config("advantages not computed".into()));
    }
    let batches = buffer.window_batches(items, model.window())?;
    let embs = model.embed(g, &batches)?;
    let ep = |&(e, t): &(usize, usize)| (&buffer.episodes[e], t);
    let adv_r: Vec<f64> = items.iter().map(|i| ep(i).0.adv_r[ep(i).1]).collect();
    let adv = if cost_channel {
        let adv_c: Vec<f64> = items.iter().map(|i| ep(i).0.adv_c[ep(i).1]).collect();
        lagrangian_advantage(&adv_r, &adv_c, lambda)
    } else {
        adv_r
    };
    let mut parts = LossValues::default();
    let mut actor_terms = Vec::with_capacity(model.num_agents());
    let mut entropy_terms = Vec::with_capacity(model.num_agents());
    for (k, &emb) in embs.iter().enumerate() {
        let c = model.chargers[k];
        let mut u = Tensor::zeros(items.len(), c);
        let mut mask = Tensor::zeros(items.len(), c);
        let mut old = Vec::with_capacity(items.len());
        for (row, i) in items.iter().enumerate() {
            let (e, t) = ep(i);
            u.data[row * c..(row + 1) * c].copy_from_slice(&e.u[t][k]);
            for (j, &m) in e.masks[t][k].iter().enumerate() {
                mask.data[row * c + j] = if m { 1.0 } else { 0.0 };
            }
            old.push(e.logp[t][k]);
        }
        let actor = model.actor(k);
        let mean = model.actor_mean(g, k, emb, &batches[k]);
        let logp = actor.log_prob(g, mean, &u, &mask);
        parts.skipped += g
            .value(logp)
            .data
            .iter()
            .zip(&old)
            .filter(|(n, o)| !(*n - *o).is_finite() || (*n - *o).abs() > MAX_LOG_RATIO)
            .count();
        actor_terms.push(surrogate_loss(g, logp, &old, &adv, cfg.clip_eps));
        entropy_terms.push(actor.entropy(g, &mask));
    }
    let mut actor_loss = actor_terms[0];
    for &t in &actor_terms[1..] {
        actor_loss = g.add(actor_loss, t);
    }
    let mut entropy = entropy_terms[0];
    for &t in &entropy_terms[1..] {
        entropy = g.add(entropy, t);
    }
    parts.actor = g.value(actor_loss).item();
    parts.entropy = g.value(entropy).item();

    let ret_r: Vec<f64> = items.iter().map(|i| ep(i).0.ret_r[ep(i).1]).collect();
    let vr = model.value(g, CriticKind::Reward, &embs)?;
    let lr = value_loss(g, vr, &ret_r);
    parts.critic_r = g.value(lr).item();
    let mut critic = lr;
    if cost_channel {
        let ret_c: Vec<f64> = items.iter().map(|i| ep(i).0.ret_c[ep(i).1]).collect();
        let vc = model.value(g, CriticKind::Cost, &embs)?;
        let lc = value_loss(g, vc, &ret_c);
        parts.critic_c = g.value(lc).item();
        critic = g.add(critic, lc);
        if cfg.critic_mode == CriticMode::PaperLiteral {
            let ret_l = lagrangian_advantage(&ret_r, &ret_c, lambda);
            let vl = model.value(g, CriticKind::Lagrangian, &embs)?;
            let ll = value_loss(g, vl, &ret_l);
            parts.critic_l = g.value(ll).item();
            critic = g.add(critic, ll);
        }
    }
    let critic = g.scale(critic, cfg.value_coef);
    let mut total = g.add(actor_loss, critic);
    if cfg.entropy_coef != 0.0 {
        let bonus = g.scale(entropy, -cfg.entropy_coef);
        total = g.add(total, bonus);
    }
    if !g.value(total).is_finite() {
        return Err(LearnerError::Diff(DiffError::NonFinite { op: "loss" }));
    }
    Ok((total, parts))
}

/// Means of the loss parts over all minibatches of an update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub losses: LossValues,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Clips the reward path (encoder, actors, reward critic) and each cost-side head separately.
pub fn clip_gradients(model: &Model, grads: &mut Grads, max_norm: f64) -> f64 {
    let main = grads.clip_norm_where(max_norm, |id| {
        matches!(model.group(id), ParamGroup::Encoder | ParamGroup::Actor | ParamGroup::RewardCritic)
    });
    grads.clip_norm_where(max_norm, |id| model.group(id) == ParamGroup::CostCritic);
    grads.clip_norm_where(max_norm, |id| model.group(id) == ParamGroup::LagrangianCritic);
    main
}

/// `cfg.epochs` passes of shuffled minibatch updates over the buffer.
pub fn ppo_update(
    model: &mut Model,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    lambda: f64,
    cost_channel: bool,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<UpdateStats, LearnerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = buffer.index();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        index.shuffle(&mut rng);
        for items in index.chunks(cfg.minibatch.max(1)) {
            let dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng));
            let (mut grads, parts) = {
                let mut g = Graph::training(&model.params, dropout_rng);
                let (loss, parts) = minibatch_loss(&mut g, model, buffer, items, lambda, cost_channel, cfg)?;
                (g.backward(loss)?, parts)
            };
            if parts.skipped > 0 {
                log::warn!("{} transitions with extreme importance ratios were clamped", parts.skipped);
            }
            stats.grad_norm += clip_gradients(model, &mut grads, cfg.max_grad_norm);
            adam.update(&mut model.params, &grads)?;
            let l = &mut stats.losses;
            l.actor += parts.actor;
            l.critic_r += parts.critic_r;
            l.critic_c += parts.critic_c;
            l.critic_l += parts.critic_l;
            l.entropy += parts.entropy;
            l.skipped += parts.skipped;
            stats.minibatches += 1;
        }
    }
    let n = stats.minibatches.max(1) as f64;
    let l = &mut stats.losses;
    l.actor /= n;
    l.critic_r /= n;
    l.critic_c /= n;
    l.critic_l /= n;
    l.entropy /= n;
    stats.grad_norm /= n;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamSet;

    #[test]
    fn identity_policy_loss_is_negative_mean_advantage() {
        let mut p = ParamSet::new();
        let id = p.add("lp", Tensor::from_vec(3, 1, vec![-1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut g = Graph::new(&p);
        let lp = g.param(id);
        let adv = [1.0, -0.5, 2.0];
        let loss = surrogate_loss(&mut g, lp, &[-1.0, -2.0, 0.5], &adv, 0.2);
        assert!((g.value(loss).item() + 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clipped_branch_has_zero_gradient() {
        let eps = 0.2f64;
        let mut p = ParamSet::new();
        let id = p.add("lp", Tensor::scalar((1.0f64 + 2.0 * eps).ln())).unwrap();
        let mut g = Graph::new(&p);
        let lp = g.param(id);
        let loss = surrogate_loss(&mut g, lp, &[0.0], &[3.0], eps);
        // clipped branch: -(1 + eps) * A
        assert!((g.value(loss).item() + 1.2 * 3.0).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).data, vec![0.0]);
    }

    #[test]
    fn unclipped_gradient_matches_hand_value() {
        let mut p = ParamSet::new();
        let id = p.add("lp", Tensor::scalar(0.1)).unwrap();
        let mut g = Graph::new(&p);
        let lp = g.param(id);
        let loss = surrogate_loss(&mut g, lp, &[0.0], &[2.0], 0.2);
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(id).data[0] + 2.0 * 0.1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn pessimism() {
        for &(r, a) in &[(1.5, 1.0), (0.5, -1.0), (1.0, 2.0), (3.0, -2.0)] {
            assert!(clipped_surrogate(r, a, 0.2) <= r * a + 1e-15);
        }
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
    }
}

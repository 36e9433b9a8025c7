//! Actors, critics and the parameter set that holds them.

use super::LearnerError;
use crate::diffcore::{DiffError, Graph, Linear, ParamId, ParamSet, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, ObservationWindow, WindowBatch};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// `ln(2 pi) / 2`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// One encoder for all agents instead of one per agent.
    pub shared_encoder: bool,
    /// One actor network for all agents instead of one per agent.
    pub share_actors: bool,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    /// Initial log standard deviation of the pre-squash Gaussian.
    pub init_log_std: f64,
    /// Adds a third head regressing the combined `r - lambda c` return.
    pub lagrangian_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            shared_encoder: true,
            share_actors: false,
            actor_hidden: 64,
            critic_hidden: 128,
            init_log_std: -0.5,
            lagrangian_head: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    Reward,
    Cost,
    /// Combined `r - lambda c` head.
    Lagrangian,
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Actor,
    RewardCritic,
    CostCritic,
    LagrangianCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the policy distribution.
    Sample,
    /// Use the distribution mean.
    Deterministic,
}

/// Maps a pre-squash value to kW in `[lo, hi]`.
pub fn squash(u: f64, lo: f64, hi: f64) -> f64 {
    lo + 0.5 * (u.tanh() + 1.0) * (hi - lo)
}

/// `ln |d squash / du|`, stable for large `|u|`.
pub fn squash_log_det(u: f64, lo: f64, hi: f64) -> f64 {
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    (0.5 * (hi - lo)).ln() + 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of `u` under a diagonal Gaussian, summed over unmasked entries.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64], mask: &[bool]) -> f64 {
    let mut lp = 0.0;
    for j in 0..u.len() {
        if mask[j] {
            let z = (u[j] - mean[j]) * (-log_std[j]).exp();
            lp += -0.5 * z * z - log_std[j] - HALF_LN_2PI;
        }
    }
    lp
}

/// Per-agent stochastic policy with a state-independent log std.
///
/// The agent embedding passes through a context MLP; one head, shared by
/// all of the agent's chargers, maps the context plus a charger's own
/// newest features to that charger's pre-squash mean, followed by a
/// per-charger offset.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub chargers: usize,
    /// Lower action bound in kW (negative: discharge).
    pub lo: f64,
    /// Upper action bound in kW.
    pub hi: f64,
    l1: Linear,
    l2: Linear,
    c1: Linear,
    c2: Linear,
    offset: ParamId,
    log_std: ParamId,
}

impl ActorPolicy {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        chargers: usize,
        charger_features: usize,
        bounds: (f64, f64),
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let l1 = params.linear(&format!("{prefix}.l1"), in_dim, hidden, rng)?;
        let l2 = params.linear(&format!("{prefix}.l2"), hidden, hidden, rng)?;
        let c1 = params.linear(&format!("{prefix}.c1"), hidden + charger_features, hidden, rng)?;
        let c2 = params.linear(&format!("{prefix}.c2"), hidden, 1, rng)?;
        params.get_mut(c2.w).data.iter_mut().for_each(|w| *w *= 0.01);
        let offset = params.add(format!("{prefix}.offset"), Tensor::zeros(1, chargers))?;
        let log_std = params.add(format!("{prefix}.log_std"), Tensor::filled(1, chargers, init_log_std))?;
        Ok(Self { chargers, lo: bounds.0, hi: bounds.1, l1, l2, c1, c2, offset, log_std })
    }

    /// Pre-squash mean, `B x chargers`, from embeddings `B x d` and
    /// per-charger features `(B * chargers) x f` (row `b * chargers + j`).
    pub fn mean(&self, g: &mut Graph<'_>, emb: Var, charger_feats: &Tensor) -> Var {
        let b = g.value(emb).rows;
        let c = self.chargers;
        let h = g.linear(emb, &self.l1);
        let h = g.tanh(h);
        let h = g.linear(h, &self.l2);
        let h = g.tanh(h);
        let rep = g.gather_rows(h, Arc::new((0..b * c).map(|r| r / c).collect()));
        let f = g.input(charger_feats.clone());
        let x = g.concat_cols(&[rep, f]);
        let x = g.linear(x, &self.c1);
        let x = g.tanh(x);
        let m = g.linear(x, &self.c2);
        let m = g.reshape(m, b, c);
        let off = g.param(self.offset);
        g.add_row(m, off)
    }

    pub fn log_std_var(&self, g: &mut Graph<'_>) -> Var {
        g.param(self.log_std)
    }

    pub fn log_std<'a>(&self, params: &'a ParamSet) -> &'a [f64] {
        &params.get(self.log_std).data
    }

    /// Masked Gaussian log-density of the stored pre-squash samples `u`, `B x 1`.
    pub fn log_prob(&self, g: &mut Graph<'_>, mean: Var, u: &Tensor, mask: &Tensor) -> Var {
        let log_std = self.log_std_var(g);
        let neg = g.scale(log_std, -1.0);
        let inv_std = g.exp(neg);
        let u = g.input(u.clone());
        let diff = g.sub(u, mean);
        let z = g.mul_row(diff, inv_std);
        let zz = g.square(z);
        let quad = g.scale(zz, -0.5);
        let dens = g.add_row(quad, neg);
        let dens = g.add_scalar(dens, -HALF_LN_2PI);
        let masked = g.mul_const(dens, Arc::new(mask.clone()));
        g.row_sum(masked)
    }

    /// Mean entropy per row of the masked Gaussian, `1 x 1`.
    pub fn entropy(&self, g: &mut Graph<'_>, mask: &Tensor) -> Var {
        let log_std = self.log_std_var(g);
        let zeros = g.input(Tensor::zeros(mask.rows, mask.cols));
        let per = g.add_row(zeros, log_std);
        let per = g.add_scalar(per, 0.5 + HALF_LN_2PI);
        let masked = g.mul_const(per, Arc::new(mask.clone()));
        let total = g.sum(masked);
        g.scale(total, 1.0 / mask.rows.max(1) as f64)
    }

    pub fn to_kw(&self, u: f64) -> f64 {
        squash(u, self.lo, self.hi)
    }

    /// Log-density of the squashed action in kW space.
    pub fn action_log_prob(&self, u: &[f64], mean: &[f64], log_std: &[f64], mask: &[bool]) -> f64 {
        let base = gaussian_log_prob(u, mean, log_std, mask);
        let det: f64 = (0..u.len()).filter(|&j| mask[j]).map(|j| squash_log_det(u[j], self.lo, self.hi)).sum();
        base - det
    }
}

/// Centralized value head over the joint embedding.
#[derive(Debug, Clone)]
pub struct Critic {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl Critic {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Result<Self, DiffError> {
        let l1 = params.linear(&format!("{prefix}.l1"), in_dim, hidden, rng)?;
        let l2 = params.linear(&format!("{prefix}.l2"), hidden, hidden, rng)?;
        let out = params.linear(&format!("{prefix}.out"), hidden, 1, rng)?;
        params.get_mut(out.w).data.iter_mut().for_each(|w| *w *= 0.1);
        Ok(Self { l1, l2, out })
    }

    /// `B x 1` values.
    pub fn forward(&self, g: &mut Graph<'_>, joint: Var) -> Var {
        let h = g.linear(joint, &self.l1);
        let h = g.tanh(h);
        let h = g.linear(h, &self.l2);
        let h = g.tanh(h);
        g.linear(h, &self.out)
    }
}

/// One agent's action at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    /// Pre-squash sample per charger.
    pub u: Vec<f64>,
    /// Applied command per charger in kW.
    pub kw: Vec<f64>,
    /// Masked Gaussian log-density of `u`.
    pub logp: f64,
}

/// Scenario-dependent dimensions of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub obs_dim: usize,
    /// Charger count per agent.
    pub chargers: Vec<usize>,
    /// Column of the first charger feature within an observation.
    pub charger_offset: usize,
    /// Features per charger slot.
    pub charger_features: usize,
    /// `(lower, upper)` kW bound of every charger command.
    pub bounds: (f64, f64),
}

impl ModelShape {
    pub fn of_env(env: &crate::env::EvcsEnv) -> Self {
        let (dis, ch) = env.charger_limits();
        Self {
            obs_dim: env.obs_dim(),
            chargers: (0..env.num_agents()).map(|k| env.chargers(k)).collect(),
            charger_offset: env.layout().charger_offset(),
            charger_features: crate::env::ObsLayout::CHARGER_FEATURES,
            bounds: (-dis, ch),
        }
    }
}

/// Encoder(s), actors and critics in one parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub obs_dim: usize,
    pub chargers: Vec<usize>,
    pub params: ParamSet,
    encoders: Vec<Encoder>,
    actors: Vec<ActorPolicy>,
    critic_r: Critic,
    critic_c: Critic,
    critic_l: Option<Critic>,
}

impl Model {
    pub fn new(config: ModelConfig, shape: ModelShape, seed: u64) -> Result<Self, LearnerError> {
        let (obs_dim, chargers) = (shape.obs_dim, shape.chargers.clone());
        let k = chargers.len();
        let max_c = chargers.iter().copied().max().unwrap_or(0);
        if shape.charger_offset + max_c * shape.charger_features > obs_dim {
            return Err(LearnerError::Config("charger features exceed the observation".into()));
        }
        if k == 0 {
            return Err(LearnerError::Config("model needs at least one agent".into()));
        }
        if config.share_actors && chargers.iter().any(|&c| c != chargers[0]) {
            return Err(LearnerError::Config("shared actors need equal charger counts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoders = if config.shared_encoder {
            vec![Encoder::new(&mut params, "enc", obs_dim, config.encoder, &mut rng)?]
        } else {
            (0..k)
                .map(|i| Encoder::new(&mut params, &format!("enc{i}"), obs_dim, config.encoder, &mut rng))
                .collect::<Result<_, _>>()?
        };
        let emb = config.encoder.output_dim(obs_dim);
        let actor_count = if config.share_actors { 1 } else { k };
        let mut actors = Vec::with_capacity(actor_count);
        for (i, &c) in chargers.iter().enumerate().take(actor_count) {
            let prefix = if config.share_actors { "actor".to_string() } else { format!("actor{i}") };
            actors.push(ActorPolicy::new(
                &mut params,
                &prefix,
                emb,
                config.actor_hidden,
                c,
                shape.charger_features,
                shape.bounds,
                config.init_log_std,
                &mut rng,
            )?);
        }
        let joint = emb * k;
        let critic_r = Critic::new(&mut params, "critic_r", joint, config.critic_hidden, &mut rng)?;
        let critic_c = Critic::new(&mut params, "critic_c", joint, config.critic_hidden, &mut rng)?;
        let critic_l = if config.lagrangian_head {
            Some(Critic::new(&mut params, "critic_l", joint, config.critic_hidden, &mut rng)?)
        } else {
            None
        };
        Ok(Self { config, shape, obs_dim, chargers, params, encoders, actors, critic_r, critic_c, critic_l })
    }

    /// Agent `k`'s per-charger features from the newest row of each window,
    /// `(B * chargers) x f`.
    pub fn charger_features(&self, k: usize, batch: &WindowBatch) -> Tensor {
        let (c, f) = (self.chargers[k], self.shape.charger_features);
        let (w, d) = (batch.window, batch.obs_dim);
        let n = batch.len();
        let mut out = Tensor::zeros(n * c, f);
        for i in 0..n {
            let row = &batch.data[((i + 1) * w - 1) * d..(i + 1) * w * d];
            for j in 0..c {
                let src = &row[self.shape.charger_offset + j * f..self.shape.charger_offset + (j + 1) * f];
                out.data[(i * c + j) * f..(i * c + j + 1) * f].copy_from_slice(src);
            }
        }
        out
    }

    /// Agent `k`'s pre-squash means for its windows, given their embeddings.
    pub fn actor_mean(&self, g: &mut Graph<'_>, k: usize, emb: Var, batch: &WindowBatch) -> Var {
        let feats = self.charger_features(k, batch);
        self.actor(k).mean(g, emb, &feats)
    }

    pub fn num_agents(&self) -> usize {
        self.chargers.len()
    }

    pub fn window(&self) -> usize {
        self.config.encoder.window
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.output_dim(self.obs_dim)
    }

    pub fn encoder(&self, k: usize) -> &Encoder {
        &self.encoders[if self.config.shared_encoder { 0 } else { k }]
    }

    pub fn actor(&self, k: usize) -> &ActorPolicy {
        &self.actors[if self.config.share_actors { 0 } else { k }]
    }

    pub fn has_lagrangian_head(&self) -> bool {
        self.critic_l.is_some()
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        let name = self.params.name(id);
        if name.starts_with("enc") {
            ParamGroup::Encoder
        } else if name.starts_with("actor") {
            ParamGroup::Actor
        } else if name.starts_with("critic_r") {
            ParamGroup::RewardCritic
        } else if name.starts_with("critic_c") {
            ParamGroup::CostCritic
        } else {
            ParamGroup::LagrangianCritic
        }
    }

    /// Shape summary stored in checkpoints and checked on restore.
    pub fn signature(&self) -> serde_json::Value {
        serde_json::json!({
            "shape": self.shape,
            "model": self.config,
        })
    }

    /// Embeds agent `k`'s windows only.
    pub fn embed_agent(&self, g: &mut Graph<'_>, k: usize, batch: &WindowBatch) -> Result<Var, DiffError> {
        Ok(self.encoder(k).forward(g, batch)?)
    }

    /// Embeddings per agent from per-agent batches of equal length.
    ///
    /// With a shared encoder all windows go through one batched call; rows
    /// never interact, so agent `k`'s embedding depends only on its own windows.
    pub fn embed(&self, g: &mut Graph<'_>, batches: &[WindowBatch]) -> Result<Vec<Var>, DiffError> {
        if batches.len() != self.num_agents() {
            return Err(DiffError::Shape(format!("{} window batches for {} agents", batches.len(), self.num_agents())));
        }
        if !self.config.shared_encoder || batches.len() == 1 {
            return batches.iter().enumerate().map(|(k, b)| self.embed_agent(g, k, b)).collect();
        }
        let n = batches[0].len();
        if batches.iter().any(|b| b.len() != n) {
            return Err(DiffError::Shape("agent batches differ in length".into()));
        }
        let first = &batches[0];
        let mut all = WindowBatch::with_capacity(first.window, first.obs_dim, n * batches.len());
        for b in batches {
            all.data.extend_from_slice(&b.data);
            all.mask.extend_from_slice(&b.mask);
        }
        let emb = self.encoders[0].forward(g, &all)?;
        Ok((0..batches.len())
            .map(|k| g.gather_rows(emb, Arc::new((k * n..(k + 1) * n).collect())))
            .collect())
    }

    /// `B x 1` values from per-agent embeddings.
    ///
    /// The cost and combined heads see a detached copy of the embedding, so
    /// the cost channel never shapes the shared encoder.
    pub fn value(&self, g: &mut Graph<'_>, kind: CriticKind, embs: &[Var]) -> Result<Var, DiffError> {
        let joint = if embs.len() == 1 { embs[0] } else { g.concat_cols(embs) };
        Ok(match kind {
            CriticKind::Reward => self.critic_r.forward(g, joint),
            CriticKind::Cost => {
                let detached = g.input(g.value(joint).clone());
                self.critic_c.forward(g, detached)
            }
            CriticKind::Lagrangian => {
                let head = self.critic_l.as_ref().ok_or_else(|| DiffError::Shape("model has no combined head".into()))?;
                let detached = g.input(g.value(joint).clone());
                head.forward(g, detached)
            }
        })
    }

    /// Reward and cost values for per-agent batches, in evaluation mode.
    pub fn values(&self, batches: &[WindowBatch]) -> Result<(Vec<f64>, Vec<f64>), DiffError> {
        let mut g = Graph::new(&self.params);
        let embs = self.embed(&mut g, batches)?;
        let vr = self.value(&mut g, CriticKind::Reward, &embs)?;
        let vc = self.value(&mut g, CriticKind::Cost, &embs)?;
        Ok((g.value(vr).data.clone(), g.value(vc).data.clone()))
    }

    fn action_from_mean(
        &self,
        k: usize,
        mean: &[f64],
        mask: &[bool],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> AgentAction {
        let actor = self.actor(k);
        let log_std = actor.log_std(&self.params);
        let u: Vec<f64> = match mode {
            ActionMode::Deterministic => mean.to_vec(),
            ActionMode::Sample => mean
                .iter()
                .zip(log_std)
                .map(|(m, s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + s.exp() * e
                })
                .collect(),
        };
        let kw = u.iter().map(|&x| actor.to_kw(x)).collect();
        let logp = gaussian_log_prob(&u, mean, log_std, mask);
        AgentAction { u, kw, logp }
    }

    /// Joint action from one window per agent. `masks[k]` marks occupied chargers.
    ///
    /// Sampling noise is drawn agent by agent, charger by charger, from `rng`.
    pub fn act(
        &self,
        windows: &[WindowBatch],
        masks: &[Vec<bool>],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<AgentAction>, DiffError> {
        let mut g = Graph::new(&self.params);
        let embs = self.embed(&mut g, windows)?;
        let mut out = Vec::with_capacity(embs.len());
        for (k, &e) in embs.iter().enumerate() {
            let m = self.actor_mean(&mut g, k, e, &windows[k]);
            let mean = g.value(m).data.clone();
            out.push(self.action_from_mean(k, &mean, &masks[k], mode, rng));
        }
        Ok(out)
    }

    /// Agent `k`'s action from its own observation window alone.
    pub fn act_agent(
        &self,
        k: usize,
        window: &ObservationWindow,
        mask: &[bool],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<AgentAction, DiffError> {
        let mut batch = WindowBatch::new(self.window(), self.obs_dim);
        batch.push(window)?;
        let mut g = Graph::new(&self.params);
        let e = self.embed_agent(&mut g, k, &batch)?;
        let m = self.actor_mean(&mut g, k, e, &batch);
        let mean = g.value(m).data.clone();
        Ok(self.action_from_mean(k, &mean, mask, mode, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(obs_dim: usize, chargers: Vec<usize>) -> ModelShape {
        ModelShape { obs_dim, chargers, charger_offset: 0, charger_features: 2, bounds: (-22.0, 22.0) }
    }

    #[test]
    fn squash_hits_bounds_and_center() {
        assert_eq!(squash(0.0, -22.0, 22.0), 0.0);
        assert!((squash(50.0, -22.0, 22.0) - 22.0).abs() < 1e-12);
        assert!((squash(-50.0, -22.0, 22.0) + 22.0).abs() < 1e-12);
        for u in [-3.0, -0.2, 0.0, 1.7, 30.0] {
            let direct = (11.0 * (1.0 - f64::tanh(u).powi(2))).ln();
            if u.abs() < 10.0 {
                assert!((squash_log_det(u, -11.0, 11.0) - direct).abs() < 1e-9);
            }
            assert!(squash_log_det(u, -11.0, 11.0).is_finite());
        }
    }

    #[test]
    fn graph_log_prob_matches_closed_form() {
        let m = Model::new(ModelConfig::default(), shape(6, vec![3, 3]), 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let emb = Tensor::uniform(2, 64, 1.0, &mut r);
        let u = Tensor::uniform(2, 3, 2.0, &mut r);
        let mask_b = [[true, false, true], [true, true, true]];
        let mask = Tensor::from_vec(2, 3, mask_b.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut g = Graph::new(&m.params);
        let e = g.input(emb);
        let feats = Tensor::uniform(6, 2, 1.0, &mut r);
        let mean = m.actor(0).mean(&mut g, e, &feats);
        let lp = m.actor(0).log_prob(&mut g, mean, &u, &mask);
        let means = g.value(mean).clone();
        for b in 0..2 {
            let direct = gaussian_log_prob(u.row(b), means.row(b), m.actor(0).log_std(&m.params), &mask_b[b]);
            assert!((g.value(lp).data[b] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_action_is_the_mean() {
        let m = Model::new(ModelConfig::default(), shape(6, vec![2]), 1).unwrap();
        let w = crate::encoder::build_window(&[vec![0.1; 6]], 0, 12).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = m.act_agent(0, &w, &[true, true], ActionMode::Deterministic, &mut r).unwrap();
        let mut g = Graph::new(&m.params);
        let mut b = WindowBatch::new(12, 6);
        b.push(&w).unwrap();
        let e = m.embed_agent(&mut g, 0, &b).unwrap();
        let mean = m.actor_mean(&mut g, 0, e, &b);
        assert_eq!(a.u, g.value(mean).data);
        assert!(a.kw.iter().all(|k| k.abs() < 22.0));
    }

    #[test]
    fn charger_features_come_from_the_newest_row() {
        let m = Model::new(ModelConfig::default(), ModelShape { charger_offset: 2, ..shape(6, vec![2]) }, 1).unwrap();
        let hist: Vec<Vec<f64>> = (0..3).map(|t| (0..6).map(|i| (10 * t + i) as f64).collect()).collect();
        let mut b = WindowBatch::new(12, 6);
        b.push_history(&hist, 1).unwrap();
        b.push_history(&hist, 2).unwrap();
        let f = m.charger_features(0, &b);
        assert_eq!(f.shape(), (4, 2));
        assert_eq!(f.data, vec![12.0, 13.0, 14.0, 15.0, 22.0, 23.0, 24.0, 25.0]);
    }
}

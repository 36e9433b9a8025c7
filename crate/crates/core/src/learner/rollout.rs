//! Trajectory collection with read-only parameter snapshots.

use super::advantage::{gae_advantages, mc_advantages, standardize, AdvantageMode};
use super::policy::{ActionMode, Model};
use super::LearnerError;
use crate::encoder::WindowBatch;
use crate::env::{metrics, EpisodeMetrics, EvcsEnv, Observation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeds of one environment instance: episode jitter and action sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSeeds {
    pub env: u64,
    pub policy: u64,
}

/// One instance's trajectory, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRollout {
    pub seeds: InstanceSeeds,
    /// `obs[k][t]` for `t` in `0..=len`.
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `masks[t][k][j]`: charger `j` of agent `k` occupied when acting at `t`.
    pub masks: Vec<Vec<Vec<bool>>>,
    /// Pre-squash samples `u[t][k][j]`.
    pub u: Vec<Vec<Vec<f64>>>,
    /// Commands in kW `actions_kw[t][k][j]`.
    pub actions_kw: Vec<Vec<Vec<f64>>>,
    /// Behaviour log-probabilities `logp[t][k]`.
    pub logp: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    /// True when the episode reached the horizon.
    pub complete: bool,
    pub metrics: Option<EpisodeMetrics>,
    pub values_r: Vec<f64>,
    pub values_c: Vec<f64>,
    pub adv_r: Vec<f64>,
    pub adv_c: Vec<f64>,
    pub ret_r: Vec<f64>,
    pub ret_c: Vec<f64>,
}

impl EpisodeRollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Transitions of whole episodes, ordered by instance then step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRollout>,
    pub advantages_ready: bool,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(EpisodeRollout::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(episode, step)` of every transition in buffer order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t))).collect()
    }

    /// One window batch per agent covering `items`.
    pub fn window_batches(&self, items: &[(usize, usize)], window: usize) -> Result<Vec<WindowBatch>, LearnerError> {
        let k_count = self.episodes.first().map(|e| e.obs.len()).unwrap_or(0);
        let mut out = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let dim = self.episodes[0].obs[k][0].len();
            let mut b = WindowBatch::with_capacity(window, dim, items.len());
            for &(e, t) in items {
                b.push_history(&self.episodes[e].obs[k], t)?;
            }
            out.push(b);
        }
        Ok(out)
    }

    /// Mean total reward and cost per episode.
    pub fn mean_episode_totals(&self) -> (f64, f64) {
        let n = self.episodes.len().max(1) as f64;
        let r: f64 = self.episodes.iter().map(|e| e.rewards.iter().sum::<f64>()).sum();
        let c: f64 = self.episodes.iter().map(|e| e.costs.iter().sum::<f64>()).sum();
        (r / n, c / n)
    }

    /// Mean per-step safety cost over all transitions.
    pub fn mean_step_cost(&self) -> f64 {
        let n = self.len().max(1) as f64;
        self.episodes.iter().flat_map(|e| &e.costs).sum::<f64>() / n
    }
}

fn split_obs(obs: Vec<Observation>) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    obs.into_iter().map(|o| (o.features, o.charger_mask)).unzip()
}

/// Runs one instance for up to `steps` steps (stopping at the horizon).
pub fn run_episode(
    template: &EvcsEnv,
    model: &Model,
    seeds: InstanceSeeds,
    steps: usize,
    mode: ActionMode,
) -> Result<(EpisodeRollout, EvcsEnv), LearnerError> {
    let mut env = template.clone();
    let k_count = env.num_agents();
    if model.num_agents() != k_count || model.obs_dim != env.obs_dim() {
        return Err(LearnerError::Dimension(format!(
            "model built for {} agents x {} features, scenario has {} x {}",
            model.num_agents(),
            model.obs_dim,
            k_count,
            env.obs_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.policy);
    let (first, mut mask) = split_obs(env.reset(seeds.env)?);
    let mut obs: Vec<Vec<Vec<f64>>> = first.into_iter().map(|f| vec![f]).collect();
    let n = steps.min(env.horizon());
    let mut ep = EpisodeRollout {
        seeds,
        obs: Vec::new(),
        masks: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        actions_kw: Vec::with_capacity(n),
        logp: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        costs: Vec::with_capacity(n),
        complete: false,
        metrics: None,
        values_r: Vec::new(),
        values_c: Vec::new(),
        adv_r: Vec::new(),
        adv_c: Vec::new(),
        ret_r: Vec::new(),
        ret_c: Vec::new(),
    };
    for t in 0..n {
        let mut windows = Vec::with_capacity(k_count);
        for hist in &obs {
            let mut b = WindowBatch::new(model.window(), model.obs_dim);
            b.push_history(hist, t)?;
            windows.push(b);
        }
        let acts = model.act(&windows, &mask, mode, &mut rng)?;
        let kw: Vec<Vec<f64>> = acts.iter().map(|a| a.kw.clone()).collect();
        let out = env.step(&kw)?;
        ep.masks.push(std::mem::take(&mut mask));
        ep.logp.push(acts.iter().map(|a| a.logp).collect());
        ep.u.push(acts.into_iter().map(|a| a.u).collect());
        ep.actions_kw.push(kw);
        ep.rewards.push(out.reward);
        ep.costs.push(out.cost);
        let (features, next_mask) = split_obs(out.observations);
        for (h, f) in obs.iter_mut().zip(features) {
            h.push(f);
        }
        mask = next_mask;
        if out.done {
            ep.complete = true;
            break;
        }
    }
    if ep.complete {
        ep.metrics = Some(metrics(env.trace()));
    }
    ep.obs = obs;
    Ok((ep, env))
}

/// Runs every instance, splitting them over `workers` threads.
///
/// Each instance owns its environment copy and random streams, so the
/// buffer does not depend on the worker count.
pub fn collect_rollout(
    template: &EvcsEnv,
    model: &Model,
    seeds: &[InstanceSeeds],
    steps: usize,
    mode: ActionMode,
    workers: usize,
) -> Result<RolloutBuffer, LearnerError> {
    let workers = workers.clamp(1, seeds.len().max(1));
    let mut slots: Vec<Option<Result<EpisodeRollout, LearnerError>>> = (0..seeds.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &s) in slots.iter_mut().zip(seeds) {
            *slot = Some(run_episode(template, model, s, steps, mode).map(|r| r.0));
        }
    } else {
        let chunk = seeds.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slot_chunk, seed_chunk) in slots.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &s) in slot_chunk.iter_mut().zip(seed_chunk) {
                        *slot = Some(run_episode(template, model, s, steps, mode).map(|r| r.0));
                    }
                });
            }
        });
    }
    let episodes = slots
        .into_iter()
        .map(|s| s.expect("every instance ran"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutBuffer { episodes, advantages_ready: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageConfig {
    pub mode: AdvantageMode,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Multiplies rewards and costs before they reach the critics.
    pub signal_scale: f64,
    /// Chunk size of the batched value pass.
    pub batch: usize,
}

/// Fills values, advantages and returns of every episode.
///
/// Reward advantages are standardized over the whole buffer; cost
/// advantages keep the units of the scaled cost.
pub fn compute_advantages(buffer: &mut RolloutBuffer, model: &Model, cfg: &AdvantageConfig) -> Result<(), LearnerError> {
    if let Some(e) = buffer.episodes.iter().position(|e| !e.complete) {
        return Err(LearnerError::IncompleteEpisode(e));
    }
    let index = buffer.index();
    let (mut vr, mut vc) = (Vec::with_capacity(index.len()), Vec::with_capacity(index.len()));
    for chunk in index.chunks(cfg.batch.max(1)) {
        let batches = buffer.window_batches(chunk, model.window())?;
        let (r, c) = model.values(&batches)?;
        vr.extend(r);
        vc.extend(c);
    }
    let mut offset = 0;
    for ep in &mut buffer.episodes {
        let n = ep.len();
        ep.values_r = vr[offset..offset + n].to_vec();
        ep.values_c = vc[offset..offset + n].to_vec();
        offset += n;
        let r: Vec<f64> = ep.rewards.iter().map(|x| x * cfg.signal_scale).collect();
        let c: Vec<f64> = ep.costs.iter().map(|x| x * cfg.signal_scale).collect();
        let ((ar, rr), (ac, rc)) = match cfg.mode {
            AdvantageMode::Gae => (
                gae_advantages(&r, &ep.values_r, cfg.gamma, cfg.gae_lambda),
                gae_advantages(&c, &ep.values_c, cfg.gamma, cfg.gae_lambda),
            ),
            AdvantageMode::Mc => (mc_advantages(&r, &ep.values_r, cfg.gamma), mc_advantages(&c, &ep.values_c, cfg.gamma)),
        };
        ep.adv_r = ar;
        ep.ret_r = rr;
        ep.adv_c = ac;
        ep.ret_c = rc;
    }
    let mut all: Vec<f64> = buffer.episodes.iter().flat_map(|e| e.adv_r.iter().copied()).collect();
    standardize(&mut all);
    let mut offset = 0;
    for ep in &mut buffer.episodes {
        let n = ep.len();
        ep.adv_r.copy_from_slice(&all[offset..offset + n]);
        offset += n;
    }
    buffer.advantages_ready = true;
    Ok(())
}

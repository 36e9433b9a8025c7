//! Deterministic evaluation of learned and baseline policies.

use super::policy::{ActionMode, Model};
use super::rollout::{run_episode, InstanceSeeds};
use super::{derive_seed, LearnerError};
use crate::env::{metrics, EpisodeMetrics, EpisodeTrace, EvcsEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed reference policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Never charges or discharges.
    Zero,
    /// Commands full charging power on every charger, every step.
    Greedy,
    /// Uniform command within the charger bounds.
    Random,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Self::Zero),
            "greedy" => Ok(Self::Greedy),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown baseline {other:?} (zero, greedy, random)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Baseline(Baseline),
    /// Distribution mean of each agent's actor.
    Model(&'a Model),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub seeds: InstanceSeeds,
    pub metrics: EpisodeMetrics,
    /// Kept only when requested.
    pub trace: Option<EpisodeTrace>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub count: usize,
}

impl MetricStat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count: n }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub energy_cost: MetricStat,
    /// Over episodes with nonzero delivered energy only.
    pub cycling_overhead: MetricStat,
    pub avg_voltage_violation: MetricStat,
    pub avg_dissatisfaction: MetricStat,
    pub objective: MetricStat,
    pub total_reward: MetricStat,
    pub total_cost: MetricStat,
}

impl EvalSummary {
    pub fn of(episodes: &[EpisodeMetrics]) -> Self {
        let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| MetricStat::of(&episodes.iter().map(f).collect::<Vec<_>>());
        let cycling: Vec<f64> = episodes.iter().filter_map(|m| m.cycling_overhead).collect();
        Self {
            energy_cost: col(&|m| m.energy_cost),
            cycling_overhead: MetricStat::of(&cycling),
            avg_voltage_violation: col(&|m| m.avg_voltage_violation),
            avg_dissatisfaction: col(&|m| m.avg_dissatisfaction),
            objective: col(&|m| m.objective),
            total_reward: col(&|m| m.total_reward),
            total_cost: col(&|m| m.total_cost),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
    pub summary: EvalSummary,
}

/// Seeds of evaluation episode `i` under base `seed`.
pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<InstanceSeeds> {
    (0..episodes as u64)
        .map(|i| InstanceSeeds { env: derive_seed(seed, &[0xE7A1, i, 0]), policy: derive_seed(seed, &[0xE7A1, i, 1]) })
        .collect()
}

/// Runs a baseline for one full episode; returns the finished environment.
pub fn run_baseline(template: &EvcsEnv, baseline: Baseline, seeds: InstanceSeeds) -> Result<EvcsEnv, LearnerError> {
    let mut env = template.clone();
    env.reset(seeds.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.policy);
    let (lo, hi) = {
        let (dis, ch) = env.charger_limits();
        (-dis, ch)
    };
    while !env.is_done() {
        let actions: Vec<Vec<f64>> = (0..env.num_agents())
            .map(|k| {
                (0..env.chargers(k))
                    .map(|_| match baseline {
                        Baseline::Zero => 0.0,
                        Baseline::Greedy => hi,
                        Baseline::Random => rng.random_range(lo..=hi),
                    })
                    .collect()
            })
            .collect();
        env.step(&actions)?;
    }
    Ok(env)
}

fn run_one(template: &EvcsEnv, policy: PolicyRef<'_>, seeds: InstanceSeeds, keep_trace: bool) -> Result<EvalEpisode, LearnerError> {
    let env = match policy {
        PolicyRef::Baseline(b) => run_baseline(template, b, seeds)?,
        PolicyRef::Model(m) => run_episode(template, m, seeds, template.horizon(), ActionMode::Deterministic)?.1,
    };
    let trace = env.trace();
    Ok(EvalEpisode { seeds, metrics: metrics(trace), trace: keep_trace.then(|| trace.clone()) })
}

/// Evaluates `policy` over the given episode seeds.
pub fn evaluate(
    template: &EvcsEnv,
    policy: PolicyRef<'_>,
    seeds: &[InstanceSeeds],
    workers: usize,
    keep_traces: bool,
) -> Result<EvalReport, LearnerError> {
    let workers = workers.clamp(1, seeds.len().max(1));
    let mut slots: Vec<Option<Result<EvalEpisode, LearnerError>>> = (0..seeds.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &s) in slots.iter_mut().zip(seeds) {
            *slot = Some(run_one(template, policy, s, keep_traces));
        }
    } else {
        let chunk = seeds.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slot_chunk, seed_chunk) in slots.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &s) in slot_chunk.iter_mut().zip(seed_chunk) {
                        *slot = Some(run_one(template, policy, s, keep_traces));
                    }
                });
            }
        });
    }
    let episodes = slots.into_iter().map(|s| s.expect("every episode ran")).collect::<Result<Vec<_>, _>>()?;
    let summary = EvalSummary::of(&episodes.iter().map(|e| e.metrics).collect::<Vec<_>>());
    Ok(EvalReport { episodes, summary })
}

//! The training loop: rollout, advantages, minibatch updates, dual update.

use super::evaluate::{eval_seeds, evaluate, Baseline, PolicyRef};
use super::lagrange::{dual_update, LagrangeState};
use super::policy::{ActionMode, Model, ModelShape, ParamGroup};
use super::ppo::ppo_update;
use super::rollout::{collect_rollout, compute_advantages, AdvantageConfig, InstanceSeeds};
use super::{derive_seed, LearnerConfig, LearnerError};
use crate::data::ScenarioBundle;
use crate::diffcore::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Checkpoint, Tensor};
use crate::env::EvcsEnv;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

const ROLLOUT_TAG: u64 = 0x5201;
const UPDATE_TAG: u64 = 0x0B7D;
const C_BAR_TAG: u64 = 0xCBA2;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean undiscounted episode reward.
    pub mean_reward: f64,
    /// Mean undiscounted episode safety cost.
    pub mean_cost: f64,
    /// Multiplier after this iteration's dual update.
    pub lambda: f64,
    pub actor_loss: f64,
    pub critic_r_loss: f64,
    pub critic_c_loss: f64,
    /// Mean of the per-episode average voltage violation.
    pub volt_violation: f64,
    /// Mean of the per-episode average unmet energy per departed EV.
    pub dissatisfaction: f64,
    /// Seconds since training started, accumulated across resumes.
    pub wall_time_s: f64,
}

impl LogRow {
    /// Whether every logged value is finite.
    pub fn is_finite(&self) -> bool {
        [
            self.mean_reward,
            self.mean_cost,
            self.lambda,
            self.actor_loss,
            self.critic_r_loss,
            self.critic_c_loss,
            self.volt_violation,
            self.dissatisfaction,
            self.wall_time_s,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Learner state between iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: LearnerConfig,
    pub model: Model,
    pub adam: Adam,
    pub lagrange: LagrangeState,
    /// Completed iterations.
    pub iteration: usize,
    pub env: EvcsEnv,
    /// Wall time of earlier sessions, taken from the log on resume.
    pub prior_wall_s: f64,
}

fn lr_scales(model: &Model, cfg: &LearnerConfig) -> Vec<f64> {
    model
        .params
        .ids()
        .map(|id| match model.group(id) {
            ParamGroup::Encoder => cfg.encoder_lr / cfg.actor_lr,
            ParamGroup::Actor => 1.0,
            _ => cfg.critic_lr / cfg.actor_lr,
        })
        .collect()
}

impl Trainer {
    /// Fresh learner. Resolves the cost threshold from the greedy baseline when unset.
    pub fn new(bundle: &ScenarioBundle, config: LearnerConfig, workers: usize) -> Result<Self, LearnerError> {
        config.validate()?;
        let env = EvcsEnv::new(bundle)?;
        let model = Model::new(config.model, ModelShape::of_env(&env), derive_seed(config.seed, &[0x1417]))?;
        let c_bar = match config.lagrange.c_bar {
            Some(c) => c,
            None => {
                let seeds = eval_seeds(derive_seed(config.seed, &[C_BAR_TAG]), config.lagrange.c_bar_episodes.max(1));
                let rep = evaluate(&env, PolicyRef::Baseline(Baseline::Greedy), &seeds, workers, false)?;
                let steps = env.horizon() as f64;
                config.lagrange.c_bar_fraction * rep.summary.total_cost.mean / steps
            }
        };
        let lagrange = LagrangeState {
            lambda: config.lagrange.lambda_init.max(0.0),
            c_bar,
            eta: config.lagrange.eta,
            lambda_max: config.lagrange.lambda_max,
        };
        let mut adam = Adam::new(&model.params, AdamConfig { lr: config.actor_lr, ..AdamConfig::default() });
        adam.lr_scale = lr_scales(&model, &config);
        Ok(Self { config, model, adam, lagrange, iteration: 0, env, prior_wall_s: 0.0 })
    }

    /// Seeds of the rollout instances of iteration `it` (0-based).
    pub fn rollout_seeds(&self, it: usize) -> Vec<InstanceSeeds> {
        (0..self.config.episodes_per_iteration as u64)
            .map(|i| InstanceSeeds {
                env: derive_seed(self.config.seed, &[ROLLOUT_TAG, it as u64, i, 0]),
                policy: derive_seed(self.config.seed, &[ROLLOUT_TAG, it as u64, i, 1]),
            })
            .collect()
    }

    /// Runs one iteration and returns its log row (without wall time).
    pub fn iterate(&mut self, workers: usize) -> Result<LogRow, LearnerError> {
        let cfg = self.config;
        let it = self.iteration;
        let seeds = self.rollout_seeds(it);
        let mut buffer = collect_rollout(&self.env, &self.model, &seeds, self.env.horizon(), ActionMode::Sample, workers)?;
        let adv_cfg = AdvantageConfig {
            mode: cfg.advantage,
            gamma: cfg.gamma,
            gae_lambda: cfg.gae_lambda,
            signal_scale: cfg.signal_scale,
            batch: cfg.ppo.minibatch,
        };
        compute_advantages(&mut buffer, &self.model, &adv_cfg)?;
        let lambda = if cfg.cost_channel { self.lagrange.lambda } else { 0.0 };
        let stats = ppo_update(
            &mut self.model,
            &mut self.adam,
            &buffer,
            lambda,
            cfg.cost_channel,
            &cfg.ppo,
            derive_seed(cfg.seed, &[UPDATE_TAG, it as u64]),
        )?;
        if !self.model.params.all_finite() {
            return Err(LearnerError::NonFinite { iteration: it + 1, what: "parameters".into() });
        }
        if cfg.cost_channel && !cfg.lagrange.frozen {
            let observed = buffer.mean_step_cost();
            if !observed.is_finite() {
                return Err(LearnerError::NonFinite { iteration: it + 1, what: "observed cost".into() });
            }
            self.lagrange = dual_update(self.lagrange, observed);
        }
        self.iteration += 1;
        let (mean_reward, mean_cost) = buffer.mean_episode_totals();
        let n = buffer.episodes.len().max(1) as f64;
        let mean_of = |f: &dyn Fn(&crate::env::EpisodeMetrics) -> f64| {
            buffer.episodes.iter().filter_map(|e| e.metrics.as_ref()).map(f).sum::<f64>() / n
        };
        let row = LogRow {
            iteration: self.iteration,
            mean_reward,
            mean_cost,
            lambda: self.lagrange.lambda,
            actor_loss: stats.losses.actor,
            critic_r_loss: stats.losses.critic_r,
            critic_c_loss: stats.losses.critic_c,
            volt_violation: mean_of(&|m| m.avg_voltage_violation),
            dissatisfaction: mean_of(&|m| m.avg_dissatisfaction),
            wall_time_s: 0.0,
        };
        if !row.is_finite() {
            return Err(LearnerError::NonFinite { iteration: self.iteration, what: "training log row".into() });
        }
        Ok(row)
    }

    /// Full learner state, restorable bit for bit.
    pub fn to_checkpoint(&self, manifest_hash: &str) -> Checkpoint {
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "signature": self.model.signature(),
            "config": self.config,
        });
        let mut ck = Checkpoint::new(manifest_hash, meta);
        ck.push_params("model.", &self.model.params);
        for (id, (m, v)) in self.model.params.ids().zip(self.adam.m.iter().zip(&self.adam.v)) {
            let name = self.model.params.name(id);
            ck.tensors.push((format!("adam.m.{name}"), m.clone()));
            ck.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        ck.tensors.push(("state.lambda".into(), Tensor::scalar(self.lagrange.lambda)));
        ck.tensors.push(("state.c_bar".into(), Tensor::scalar(self.lagrange.c_bar)));
        ck
    }

    /// Restores parameters, optimizer moments, multiplier and iteration counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), LearnerError> {
        let sig = ck.metadata.get("signature").cloned().unwrap_or_default();
        if sig != self.model.signature() {
            return Err(LearnerError::Dimension(format!(
                "checkpoint model {sig} does not match {}",
                self.model.signature()
            )));
        }
        ck.restore_params("model.", &mut self.model.params)?;
        for (i, id) in self.model.params.ids().enumerate() {
            let name = self.model.params.name(id).to_string();
            for (prefix, dst) in [("adam.m.", &mut self.adam.m[i]), ("adam.v.", &mut self.adam.v[i])] {
                let t = ck
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| LearnerError::Checkpoint(format!("missing optimizer state for {name}")))?;
                if t.shape() != dst.shape() {
                    return Err(LearnerError::Checkpoint(format!("optimizer state shape for {name}")));
                }
                dst.data.copy_from_slice(&t.data);
            }
        }
        let scalar = |n: &str| {
            ck.get(n).map(Tensor::item).ok_or_else(|| LearnerError::Checkpoint(format!("missing {n}")))
        };
        self.lagrange.lambda = scalar("state.lambda")?;
        self.lagrange.c_bar = scalar("state.c_bar")?;
        let meta_u64 = |key: &str| {
            ck.metadata
                .get(key)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| LearnerError::Checkpoint(format!("missing {key}")))
        };
        self.iteration = meta_u64("iteration")? as usize;
        self.adam.step = meta_u64("adam_step")?;
        Ok(())
    }

    /// Rebuilds a learner from a checkpoint without resolving the threshold again.
    pub fn from_checkpoint(bundle: &ScenarioBundle, ck: &Checkpoint) -> Result<Self, LearnerError> {
        let config: LearnerConfig = ck
            .metadata
            .get("config")
            .cloned()
            .ok_or_else(|| LearnerError::Checkpoint("missing config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| LearnerError::Checkpoint(e.to_string())))?;
        let mut cfg = config;
        cfg.lagrange.c_bar = Some(0.0);
        let mut t = Self::new(bundle, cfg, 1)?;
        t.config = config;
        t.restore(ck)?;
        Ok(t)
    }
}

/// Loads only the model of a checkpoint, for evaluation.
pub fn load_model(bundle: &ScenarioBundle, path: impl AsRef<Path>) -> Result<Model, LearnerError> {
    let ck = read_checkpoint(path)?;
    Ok(Trainer::from_checkpoint(bundle, &ck)?.model)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Total iterations to reach (a resumed run continues up to this count).
    pub iterations: usize,
    pub workers: usize,
    /// Directory for `train_log.csv` and `checkpoints/`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Checkpoint every this many iterations (and always after the last).
    pub checkpoint_every: usize,
    /// Stored in every checkpoint header.
    pub manifest_hash: String,
    /// With `false` the `wall_time_s` column is written as 0, making the log reproducible bit for bit.
    pub wall_clock: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { iterations: 1, workers: 1, out_dir: None, resume: false, checkpoint_every: 10, manifest_hash: String::new(), wall_clock: true }
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>, LearnerError> {
    let mut rdr = csv::Reader::from_path(path.as_ref()).map_err(|e| LearnerError::Log(e.to_string()))?;
    rdr.deserialize().map(|r| r.map_err(|e| LearnerError::Log(e.to_string()))).collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), LearnerError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LearnerError::Log(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| LearnerError::Log(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Every log row, including those of earlier sessions when resumed.
    pub log: Vec<LogRow>,
}

fn save(trainer: &Trainer, dir: &Path, opts: &TrainOptions) -> Result<(), LearnerError> {
    let ck = trainer.to_checkpoint(&opts.manifest_hash);
    let ckdir = dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckdir)?;
    write_checkpoint(ckdir.join(checkpoint_name(trainer.iteration)), &ck)?;
    write_checkpoint(ckdir.join(LATEST_CHECKPOINT), &ck)?;
    Ok(())
}

/// Trains up to `opts.iterations`, logging and checkpointing under `opts.out_dir`.
///
/// A non-finite loss or parameter aborts with an error; checkpoints already
/// on disk are left untouched.
pub fn train(bundle: &ScenarioBundle, config: LearnerConfig, opts: &TrainOptions) -> Result<TrainOutcome, LearnerError> {
    let mut log = Vec::new();
    let mut trainer = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => {
            let path = dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT);
            let ck = read_checkpoint(&path)?;
            let mut t = Trainer::from_checkpoint(bundle, &ck)?;
            let log_path = dir.join(LOG_FILE);
            if log_path.exists() {
                log = read_log(&log_path)?;
                log.retain(|r| r.iteration <= t.iteration);
            }
            t.prior_wall_s = log.last().map_or(0.0, |r| r.wall_time_s);
            log::info!("resuming from iteration {}", t.iteration);
            t
        }
        (None, true) => return Err(LearnerError::Config("resume needs an output directory".into())),
        _ => Trainer::new(bundle, config, opts.workers)?,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        write_log(&dir.join(LOG_FILE), &log)?;
    }
    let start = Instant::now();
    let every = opts.checkpoint_every.max(1);
    while trainer.iteration < opts.iterations {
        let mut row = trainer.iterate(opts.workers)?;
        row.wall_time_s = if opts.wall_clock { trainer.prior_wall_s + start.elapsed().as_secs_f64() } else { 0.0 };
        log::info!(
            "iter {} reward {:.2} cost {:.2} lambda {:.4} vv {:.3e} ds {:.3}",
            row.iteration,
            row.mean_reward,
            row.mean_cost,
            row.lambda,
            row.volt_violation,
            row.dissatisfaction
        );
        log.push(row);
        if let Some(dir) = &opts.out_dir {
            write_log(&dir.join(LOG_FILE), &log)?;
            if trainer.iteration % every == 0 || trainer.iteration == opts.iterations {
                save(&trainer, dir, opts)?;
            }
        }
    }
    trainer.prior_wall_s += start.elapsed().as_secs_f64();
    Ok(TrainOutcome { trainer, log })
}

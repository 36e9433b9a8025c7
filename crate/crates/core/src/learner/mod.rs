//! Lagrangian multi-agent PPO with centralized critics and decentralized actors.
//!
//! Each agent's actor reads only its own encoded observation window; the
//! reward and cost critics read the concatenation of every agent's
//! embedding and exist only during training. One iteration collects whole
//! episodes with frozen parameters, estimates advantages for both channels,
//! runs clipped-surrogate minibatch epochs on `A_r - lambda A_c`, and finally
//! moves `lambda` by projected dual ascent on the observed mean step cost.

mod advantage;
mod evaluate;
mod lagrange;
mod policy;
mod ppo;
mod rollout;
mod train;

pub use advantage::{
    discounted_returns, gae_advantages, lagrangian_advantage, mc_advantages, standardize, AdvantageMode,
};
pub use evaluate::{
    eval_seeds, evaluate, run_baseline, Baseline, EvalEpisode, EvalReport, EvalSummary, MetricStat, PolicyRef,
};
pub use lagrange::{dual_update, LagrangeState};
pub use policy::{
    gaussian_log_prob, squash, squash_log_det, ActionMode, ActorPolicy, AgentAction, Critic, CriticKind, Model,
    ModelConfig, ModelShape, ParamGroup, HALF_LN_2PI,
};
pub use ppo::{
    clip_gradients, clipped_surrogate, minibatch_loss, ppo_update, surrogate_loss, value_loss, vanilla_pg_loss,
    CriticMode, LossValues, PpoConfig, UpdateStats, MAX_LOG_RATIO,
};
pub use rollout::{
    collect_rollout, compute_advantages, run_episode, AdvantageConfig, EpisodeRollout, InstanceSeeds, RolloutBuffer,
};
pub use train::{
    checkpoint_name, load_model, read_log, train, LogRow, TrainOptions, TrainOutcome, Trainer, CHECKPOINT_DIR,
    LATEST_CHECKPOINT, LOG_FILE,
};

use crate::diffcore::DiffError;
use crate::encoder::{EncoderConfig, EncoderError};
use crate::env::EnvError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LearnerError {
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("episode {0} in the buffer is incomplete")]
    IncompleteEpisode(usize),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training log: {0}")]
    Log(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mixes a base seed with a path of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LagrangeConfig {
    pub lambda_init: f64,
    pub eta: f64,
    /// Threshold on the mean per-step cost; `None` derives it from the greedy baseline.
    pub c_bar: Option<f64>,
    /// Fraction of the greedy baseline's mean per-step cost used when `c_bar` is `None`.
    pub c_bar_fraction: f64,
    pub c_bar_episodes: usize,
    pub lambda_max: Option<f64>,
    /// Keep `lambda` at `lambda_init`.
    pub frozen: bool,
}

impl Default for LagrangeConfig {
    fn default() -> Self {
        Self {
            lambda_init: 0.0,
            eta: 1.0,
            c_bar: None,
            c_bar_fraction: 0.1,
            c_bar_episodes: 4,
            lambda_max: Some(300.0),
            frozen: false,
        }
    }
}

/// Every algorithmic setting of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    pub advantage: AdvantageMode,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Multiplies rewards and costs before they reach the critics.
    pub signal_scale: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    /// Parallel environment instances (whole episodes) per iteration.
    pub episodes_per_iteration: usize,
    pub lagrange: LagrangeConfig,
    /// With `false` the cost critic, cost advantages and dual update are all off.
    pub cost_channel: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LearnerConfig {
    /// Small attention encoder sized for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            ppo: PpoConfig::default(),
            advantage: AdvantageMode::Gae,
            gamma: 0.99,
            gae_lambda: 0.95,
            signal_scale: 1e-3,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            encoder_lr: 1e-3,
            episodes_per_iteration: 4,
            lagrange: LagrangeConfig::default(),
            cost_channel: true,
        }
    }

    /// Six-layer, width-256 attention encoder with dropout.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model.encoder = EncoderConfig::paper();
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Config(m.to_string()));
        self.model.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.ppo.clip_eps > 0.0 && self.ppo.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.ppo.epochs == 0 || self.ppo.minibatch == 0 || self.episodes_per_iteration == 0 {
            return bad("epochs, minibatch and episodes_per_iteration must be positive");
        }
        if [self.actor_lr, self.critic_lr, self.encoder_lr].iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return bad("signal_scale must be positive");
        }
        if self.lagrange.eta < 0.0 || self.lagrange.lambda_init < 0.0 {
            return bad("eta and lambda_init must be nonnegative");
        }
        if self.model.actor_hidden == 0 || self.model.critic_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        if self.ppo.critic_mode == CriticMode::PaperLiteral && !self.model.lagrangian_head {
            return bad("paper-literal critic mode needs model.lagrangian_head");
        }
        Ok(())
    }
}

//! PPO with truncated backpropagation through the recurrent memory.

mod rollout;
mod runner;
mod tasks;
mod train;
mod update;

use serde::{Deserialize, Serialize};

use crate::gridenv::EnvError;
use crate::maps::MapError;
use crate::numkit::NumError;
use crate::policy::PolicyError;

pub use rollout::{collect_rollouts, EpisodeSummary, RolloutBatch, Transition};
pub use runner::{act_batch, argmax, sample_action, ActRow, AgentRuntime, EnvSlot};
pub use tasks::{TaskMap, TaskSet};
pub(crate) use tasks::mix_seed;
pub use train::{load_checkpoint, save_checkpoint, train, IterationLog, TrainOutcome, TrainState};
pub use update::{measure_kl, ppo_update, UpdateStats};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("{0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<NumError> for TrainerError {
    fn from(e: NumError) -> Self {
        TrainerError::Policy(PolicyError::Num(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    AdaptiveKl,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPOConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub gamma: f64,
    pub clip_ratio: f64,
    /// Agent transitions collected per iteration.
    pub batch_size: usize,
    /// Transitions per gradient step.
    pub minibatch_size: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gae_lambda: f64,
    /// Truncation length of backpropagation through memory.
    pub recurrence: usize,
    pub workers: usize,
    pub envs_per_worker: usize,
    /// Agent transitions over the whole run.
    pub total_steps: u64,
    pub target_kl: f64,
    pub kl_factor: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    /// Transitions re-forwarded after an update to measure the KL.
    pub kl_sample: usize,
    /// Let gradients flow between agents through the pool during updates.
    #[serde(default)]
    pub pool_gradient: bool,
}

impl PPOConfig {
    pub fn mapf() -> Self {
        Self {
            lr: 0.00013,
            lr_schedule: LrSchedule::AdaptiveKl,
            gamma: 0.9716,
            clip_ratio: 0.2,
            batch_size: 16384,
            minibatch_size: 16384,
            epochs: 1,
            entropy_coef: 0.0156,
            value_coef: 0.5,
            gae_lambda: 0.95,
            recurrence: 8,
            workers: 4,
            envs_per_worker: 4,
            total_steps: 20_000_000,
            target_kl: 0.008,
            kl_factor: 1.5,
            lr_min: 1e-6,
            lr_max: 1e-2,
            max_grad_norm: None,
            kl_sample: 2048,
            pool_gradient: false,
        }
    }

    pub fn lmapf() -> Self {
        Self {
            lr: 0.00022,
            lr_schedule: LrSchedule::Constant,
            gamma: 0.9756,
            entropy_coef: 0.023,
            workers: 8,
            total_steps: 1_000_000_000,
            ..Self::mapf()
        }
    }

    pub fn num_envs(&self) -> usize {
        self.workers * self.envs_per_worker
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("ppo.{name} must be positive, got {v}"));
            }
        };
        positive("lr", self.lr);
        positive("clip_ratio", self.clip_ratio);
        positive("target_kl", self.target_kl);
        if let Some(v) = self.max_grad_norm {
            positive("max_grad_norm", v);
        }
        positive("lr_min", self.lr_min);
        if self.kl_factor.is_nan() || self.kl_factor <= 1.0 {
            errs.push(format!("ppo.kl_factor must exceed 1, got {}", self.kl_factor));
        }
        if self.lr_min > self.lr_max {
            errs.push(format!("ppo.lr_min {} exceeds lr_max {}", self.lr_min, self.lr_max));
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("ppo.{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("ppo.{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("minibatch_size", self.minibatch_size),
            ("epochs", self.epochs),
            ("recurrence", self.recurrence),
            ("workers", self.workers),
            ("envs_per_worker", self.envs_per_worker),
        ] {
            if v == 0 {
                errs.push(format!("ppo.{name} must be at least 1"));
            }
        }
        if self.total_steps == 0 {
            errs.push("ppo.total_steps must be at least 1".into());
        }
        errs
    }
}

/// Generalized advantage estimation over one trajectory.
///
/// `bootstrap` is the value of the state after the last step, used when that
/// step is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainerError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(TrainerError::Length(format!("{} rewards, {} values, {} dones", n, values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Adaptive-KL learning-rate rule.
pub fn adaptive_kl_lr(measured_kl: f64, lr: f64, cfg: &PPOConfig) -> f64 {
    let next = if measured_kl > 2.0 * cfg.target_kl {
        lr / cfg.kl_factor
    } else if measured_kl < cfg.target_kl / 2.0 {
        lr * cfg.kl_factor
    } else {
        lr
    };
    if next.is_nan() {
        return cfg.lr_min;
    }
    next.clamp(cfg.lr_min, cfg.lr_max)
}

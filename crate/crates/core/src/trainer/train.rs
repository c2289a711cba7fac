use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::numkit::{AdamState, Tensor};
use crate::policy::Policy;
use crate::rewards::RewardFn;

use super::rollout::{collect_rollouts, EpisodeSummary};
use super::tasks::{mix_seed, TaskSet};
use super::update::{measure_kl, minibatches, ppo_update};
use super::{adaptive_kl_lr, LrSchedule, PPOConfig, TrainerError};

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: Policy,
    pub adam: AdamState,
    pub iteration: u64,
    /// Agent transitions consumed so far.
    pub transitions: u64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(policy: Policy, lr: f64) -> Self {
        let adam = AdamState::new(policy.params().tensors());
        Self { policy, adam, iteration: 0, transitions: 0, lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub transitions: u64,
    pub env_steps: usize,
    /// Learning rate used by this iteration's update.
    pub lr: f64,
    /// KL(old ‖ new) measured after the update.
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub episodes: usize,
    pub mean_reward: Option<f64>,
    pub csr: Option<f64>,
    pub isr: Option<f64>,
    pub soc: Option<f64>,
    pub throughput: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<IterationLog>,
    /// The hook asked to stop before the step budget ran out.
    pub stopped_early: bool,
}

fn mean_of(eps: &[EpisodeSummary], f: impl Fn(&EpisodeSummary) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = eps.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Runs PPO iterations until `cfg.total_steps` transitions are consumed.
///
/// Iteration `i` depends only on `(seed, i)` and the incoming state, so a run
/// resumed from a checkpoint continues exactly as the uninterrupted one.
/// `hook` sees every iteration; returning `false` stops the run.
pub fn train<F>(
    mut state: TrainState,
    tasks: &TaskSet,
    reward: &RewardFn,
    cfg: &PPOConfig,
    seed: u64,
    threads: usize,
    mut hook: F,
) -> Result<TrainOutcome, TrainerError>
where
    F: FnMut(&TrainState, &IterationLog) -> Result<bool, TrainerError>,
{
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(TrainerError::Config(errs.join("; ")));
    }
    let mut logs = Vec::new();
    while state.transitions < cfg.total_steps {
        let clock = Instant::now();
        let it = state.iteration;
        let batch = collect_rollouts(&state.policy, tasks, reward, cfg, seed, it, threads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, it, 1 << 63]));
        let lr = state.lr;
        let stats = ppo_update(&mut state.policy, &mut state.adam, &batch, cfg, lr, &mut rng, it)?;

        // first shuffled group of at least kl_sample transitions
        let sample = minibatches(&batch, cfg.kl_sample, cfg.pool_gradient, &mut rng).into_iter().next().unwrap_or_default();
        let kl = measure_kl(&state.policy, &batch, &sample, cfg.pool_gradient)?;
        if !kl.is_finite() {
            return Err(TrainerError::NonFinite { iteration: it, detail: format!("post-update KL {kl}") });
        }
        if cfg.lr_schedule == LrSchedule::AdaptiveKl {
            state.lr = adaptive_kl_lr(kl, state.lr, cfg);
        }
        state.iteration += 1;
        state.transitions += batch.len() as u64;

        let eps = &batch.episodes;
        let log = IterationLog {
            iteration: it,
            transitions: state.transitions,
            env_steps: batch.env_steps,
            lr,
            kl,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            grad_norm: stats.grad_norm,
            episodes: eps.len(),
            mean_reward: mean_of(eps, |e| Some(e.reward)),
            csr: mean_of(eps, |e| e.csr),
            isr: mean_of(eps, |e| e.isr),
            soc: mean_of(eps, |e| e.soc),
            throughput: mean_of(eps, |e| e.throughput),
            seconds: clock.elapsed().as_secs_f64(),
        };
        let go_on = hook(&state, &log)?;
        logs.push(log);
        if !go_on {
            return Ok(TrainOutcome { state, logs, stopped_early: true });
        }
    }
    Ok(TrainOutcome { state, logs, stopped_early: false })
}

/// Writes parameters, Adam moments and run counters. `extra` lands in the
/// metadata under `"config"`.
pub fn save_checkpoint(path: &Path, state: &TrainState, extra: serde_json::Value) -> Result<(), TrainerError> {
    let names: Vec<String> = state.policy.params().iter().map(|(n, _)| n.to_string()).collect();
    let m_names: Vec<String> = names.iter().map(|n| format!("adam.m.{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|n| format!("adam.v.{n}")).collect();
    let mut moments: Vec<(&str, &Tensor)> = Vec::with_capacity(2 * names.len());
    for (i, t) in state.adam.m.iter().enumerate() {
        moments.push((&m_names[i], t));
    }
    for (i, t) in state.adam.v.iter().enumerate() {
        moments.push((&v_names[i], t));
    }
    let meta = json!({
        "iteration": state.iteration,
        "transitions": state.transitions,
        "lr": state.lr,
        "adam_step": state.adam.step,
        "config": extra,
    });
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        state.policy.write(&mut w, &moments, meta)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]. Also returns the stored `"config"` value.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, serde_json::Value), TrainerError> {
    let (policy, ckpt) = Policy::read(BufReader::new(File::open(path)?))?;
    let meta = &ckpt.meta;
    let field = |k: &str| meta.get(k).ok_or_else(|| TrainerError::Checkpoint(format!("metadata lacks {k}")));
    let as_u64 = |k: &str| field(k)?.as_u64().ok_or_else(|| TrainerError::Checkpoint(format!("{k} is not an integer")));
    let iteration = as_u64("iteration")?;
    let transitions = as_u64("transitions")?;
    let step = as_u64("adam_step")?;
    let lr = field("lr")?.as_f64().ok_or_else(|| TrainerError::Checkpoint("lr is not a number".into()))?;
    let mut adam = AdamState::new(policy.params().tensors());
    adam.step = step;
    for (i, (name, p)) in policy.params().iter().enumerate() {
        for (prefix, dst) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
            let t = ckpt
                .tensor(&format!("{prefix}{name}"))
                .ok_or_else(|| TrainerError::Checkpoint(format!("missing {prefix}{name}")))?;
            if t.shape() != p.shape() {
                return Err(TrainerError::Checkpoint(format!("{prefix}{name}: shape {:?}", t.shape())));
            }
            *dst = t.clone();
        }
    }
    let extra = meta.get("config").cloned().unwrap_or(serde_json::Value::Null);
    Ok((TrainState { policy, adam, iteration, transitions, lr }, extra))
}

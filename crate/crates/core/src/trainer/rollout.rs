use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::{cooperative_success, individual_success, sum_of_costs};
use crate::gridenv::{Action, Mode, Observation};
use crate::policy::Policy;
use crate::rewards::RewardFn;

use super::runner::{act_batch, sample_action, EnvSlot};
use super::tasks::{mix_seed, TaskSet};
use super::{compute_gae, PPOConfig, TrainerError};

/// One agent step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub env: usize,
    pub agent: usize,
    /// Step index within the episode.
    pub step: usize,
    pub obs: Observation,
    pub action: usize,
    pub log_prob: f64,
    pub logits: Vec<f64>,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Recurrent state the step read.
    pub memory: Vec<f64>,
    /// Same agent's previous transition in this episode.
    pub prev: Option<usize>,
    /// Transitions of the other agents active at the same step.
    pub others: Vec<usize>,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub env: usize,
    pub map: String,
    pub agents: usize,
    pub length: usize,
    pub csr: Option<f64>,
    pub isr: Option<f64>,
    pub soc: Option<f64>,
    pub throughput: Option<f64>,
    /// Mean undiscounted return per agent.
    pub reward: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    /// Transition indices of each truncated-recurrence segment, in time order.
    pub segments: Vec<Vec<usize>>,
    /// Episodes that finished during collection.
    pub episodes: Vec<EpisodeSummary>,
    pub env_steps: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

fn summarize(slot: &EnvSlot, env: usize, map: &str, rewards: &[f64]) -> EpisodeSummary {
    let e = &slot.env;
    let n = e.num_agents();
    let reward = rewards.iter().sum::<f64>() / n as f64;
    match e.mode {
        Mode::Classical => {
            let arrivals: Vec<Option<usize>> = e.agents.iter().map(|a| a.arrival_step).collect();
            EpisodeSummary {
                env,
                map: map.to_string(),
                agents: n,
                length: e.step,
                csr: Some(cooperative_success(&arrivals)),
                isr: Some(individual_success(&arrivals)),
                soc: Some(sum_of_costs(&arrivals, e.episode_length) as f64),
                throughput: None,
                reward,
            }
        }
        Mode::Lifelong => {
            let goals: usize = e.agents.iter().map(|a| a.goals_reached).sum();
            EpisodeSummary {
                env,
                map: map.to_string(),
                agents: n,
                length: e.step,
                csr: None,
                isr: None,
                soc: None,
                throughput: Some(goals as f64 / e.episode_length as f64),
                reward,
            }
        }
    }
}

/// Runs all environments in lockstep until at least `cfg.batch_size`
/// transitions are collected. Environments and action sampling are seeded
/// from `(seed, iteration, env)`, so a batch depends only on those and the
/// parameters.
pub fn collect_rollouts(
    policy: &Policy,
    tasks: &TaskSet,
    reward: &RewardFn,
    cfg: &PPOConfig,
    seed: u64,
    iteration: u64,
    threads: usize,
) -> Result<RolloutBatch, TrainerError> {
    let n_envs = cfg.num_envs();
    let mut slots = Vec::with_capacity(n_envs);
    let mut map_of = Vec::with_capacity(n_envs);
    for e in 0..n_envs {
        let (env, obs, map) = tasks.reset(mix_seed(&[seed, iteration, e as u64, 0]))?;
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, iteration, e as u64, u64::MAX]));
        slots.push(EnvSlot::new(policy, env, obs, rng));
        map_of.push(map);
    }
    let mut episode_no = vec![0u64; n_envs];
    let mut last: Vec<Vec<Option<usize>>> = slots.iter().map(|s| vec![None; s.env.num_agents()]).collect();
    let mut ep_rewards: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.env.num_agents()]).collect();
    let mut batch = RolloutBatch::default();

    while batch.transitions.len() < cfg.batch_size {
        let rows = act_batch(policy, &slots, threads)?;
        let mut start = 0;
        while start < rows.len() {
            let s = rows[start].slot;
            let end = start + rows[start..].iter().take_while(|r| r.slot == s).count();
            let slot = &mut slots[s];
            let first = batch.transitions.len();
            let mut actions = Vec::with_capacity(end - start);
            for row in &rows[start..end] {
                let (action, log_prob) = sample_action(&row.logits, &mut slot.rng);
                actions.push(Action::from_index(action).expect("five actions"));
                batch.transitions.push(Transition {
                    env: s,
                    agent: row.agent,
                    step: slot.env.step,
                    obs: slot.obs[row.agent].clone().expect("active agent"),
                    action,
                    log_prob,
                    logits: row.logits.clone(),
                    value: row.value,
                    reward: 0.0,
                    done: false,
                    memory: row.memory.clone(),
                    prev: last[s][row.agent],
                    others: Vec::new(),
                    advantage: 0.0,
                    ret: 0.0,
                });
            }
            let here: Vec<usize> = (first..batch.transitions.len()).collect();
            for &t in &here {
                batch.transitions[t].others = here.iter().copied().filter(|&u| u != t).collect();
            }
            let out = slot.env.step(&actions)?;
            for (k, rec) in out.records.iter().enumerate() {
                let t = first + k;
                debug_assert_eq!(batch.transitions[t].agent, rec.agent);
                let r = reward.reward(rec);
                batch.transitions[t].reward = r;
                batch.transitions[t].done = out.agent_done[rec.agent];
                ep_rewards[s][rec.agent] += r;
                last[s][rec.agent] = Some(t);
            }
            for row in &rows[start..end] {
                let a = &mut slot.agents[row.agent];
                a.memory.clone_from(&row.next_memory);
                a.history.push(row.embedding.clone());
                a.fresh = false;
            }
            slot.obs = out.observations;
            batch.env_steps += 1;
            if out.done {
                let map_name = &tasks.maps[map_of[s]].name;
                batch.episodes.push(summarize(slot, s, map_name, &ep_rewards[s]));
                episode_no[s] += 1;
                let (env, obs, map) = tasks.reset(mix_seed(&[seed, iteration, s as u64, episode_no[s]]))?;
                slot.restart(policy, env, obs);
                map_of[s] = map;
                last[s] = vec![None; slot.env.num_agents()];
                ep_rewards[s] = vec![0.0; slot.env.num_agents()];
            }
            start = end;
        }
    }

    // Value of the state after the final step, for unfinished trajectories.
    let mut bootstrap = vec![0.0; batch.transitions.len()];
    for row in act_batch(policy, &slots, threads)? {
        if let Some(t) = last[row.slot][row.agent] {
            if !batch.transitions[t].done {
                bootstrap[t] = row.value;
            }
        }
    }

    let n = batch.transitions.len();
    let mut next = vec![None; n];
    for t in 0..n {
        if let Some(p) = batch.transitions[t].prev {
            next[p] = Some(t);
        }
    }
    for head in 0..n {
        if batch.transitions[head].prev.is_some() {
            continue;
        }
        let mut chain = vec![head];
        while let Some(t) = next[*chain.last().expect("non-empty chain")] {
            chain.push(t);
        }
        let tr = &batch.transitions;
        let rewards: Vec<f64> = chain.iter().map(|&t| tr[t].reward).collect();
        let values: Vec<f64> = chain.iter().map(|&t| tr[t].value).collect();
        let dones: Vec<bool> = chain.iter().map(|&t| tr[t].done).collect();
        let tail = bootstrap[*chain.last().expect("non-empty chain")];
        let (adv, ret) = compute_gae(&rewards, &values, &dones, tail, cfg.gamma, cfg.gae_lambda)?;
        for (k, &t) in chain.iter().enumerate() {
            batch.transitions[t].advantage = adv[k];
            batch.transitions[t].ret = ret[k];
        }
        for seg in chain.chunks(cfg.recurrence) {
            batch.segments.push(seg.to_vec());
        }
    }
    Ok(batch)
}

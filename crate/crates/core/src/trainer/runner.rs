//! Batched policy evaluation over many environments in lockstep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gridenv::{EnvState, Observation};
use crate::numkit::{Tensor, EMPTY_SLOT};
use crate::policy::{HistoryBuffer, Policy, PolicyError, StepInputs};

/// Recurrent inputs carried by one agent between steps.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub memory: Vec<f64>,
    pub history: HistoryBuffer,
    /// No step taken yet this episode: memory comes from the init head.
    pub fresh: bool,
}

impl AgentRuntime {
    pub fn new(policy: &Policy) -> Self {
        Self {
            memory: vec![0.0; policy.memory_width()],
            history: HistoryBuffer::new(policy.config().history),
            fresh: true,
        }
    }
}

/// One environment with its agents' recurrent state.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub env: EnvState,
    pub obs: Vec<Option<Observation>>,
    pub agents: Vec<AgentRuntime>,
    pub rng: ChaCha8Rng,
}

impl EnvSlot {
    pub fn new(policy: &Policy, env: EnvState, obs: Vec<Option<Observation>>, rng: ChaCha8Rng) -> Self {
        let agents = (0..env.num_agents()).map(|_| AgentRuntime::new(policy)).collect();
        Self { env, obs, agents, rng }
    }

    /// Replaces the episode and clears recurrent state.
    pub fn restart(&mut self, policy: &Policy, env: EnvState, obs: Vec<Option<Observation>>) {
        self.agents = (0..env.num_agents()).map(|_| AgentRuntime::new(policy)).collect();
        self.env = env;
        self.obs = obs;
    }

    /// Agents with an observation this step, in agent order.
    pub fn active_agents(&self) -> Vec<usize> {
        (0..self.obs.len()).filter(|&i| self.obs[i].is_some()).collect()
    }
}

/// Policy outputs for one active agent.
#[derive(Debug, Clone)]
pub struct ActRow {
    pub slot: usize,
    pub agent: usize,
    pub logits: Vec<f64>,
    pub value: f64,
    /// Memory the step read (after episode-start initialization).
    pub memory: Vec<f64>,
    pub next_memory: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn act_chunk(policy: &Policy, slots: &[EnvSlot], base: usize) -> Result<Vec<ActRow>, PolicyError> {
    let mut keys = Vec::new();
    let mut obs = Vec::new();
    for (s, slot) in slots.iter().enumerate() {
        for a in slot.active_agents() {
            keys.push((s, a));
            obs.push(slot.obs[a].as_ref().expect("active agent has an observation"));
        }
    }
    if keys.is_empty() {
        return Ok(Vec::new());
    }
    let (d, hlen, w) = (policy.config().hidden, policy.config().history, policy.memory_width());
    let emb = policy.encode_values(&obs)?;
    let fresh: Vec<usize> = (0..keys.len()).filter(|&r| slots[keys[r].0].agents[keys[r].1].fresh).collect();
    let mut memory = Vec::with_capacity(keys.len() * w);
    for &(s, a) in &keys {
        memory.extend_from_slice(&slots[s].agents[a].memory);
    }
    if !fresh.is_empty() && w > 0 {
        let data: Vec<f64> = fresh.iter().flat_map(|&r| emb.row(r).iter().copied()).collect();
        let init = policy.init_memory_values(&Tensor::new(vec![fresh.len(), d], data)?)?;
        for (k, &r) in fresh.iter().enumerate() {
            memory[r * w..(r + 1) * w].copy_from_slice(&init.data()[k * w..(k + 1) * w]);
        }
    }
    let mut hist = Vec::new();
    let mut history_idx = Vec::with_capacity(keys.len() * hlen);
    let mut hist_rows = 0u32;
    for &(s, a) in &keys {
        let h = &slots[s].agents[a].history;
        let used = h.len().min(hlen);
        history_idx.extend(std::iter::repeat_n(EMPTY_SLOT, hlen - used));
        for e in h.iter().skip(h.len() - used) {
            hist.extend_from_slice(e);
            history_idx.push(hist_rows);
            hist_rows += 1;
        }
    }
    // keys are grouped by slot, so each slot's agents form one row range
    let mut others: Vec<Vec<usize>> = Vec::with_capacity(keys.len());
    let mut lo = 0;
    while lo < keys.len() {
        let hi = lo + keys[lo..].iter().take_while(|k| k.0 == keys[lo].0).count();
        for r in lo..hi {
            others.push((lo..hi).filter(|&q| q != r).collect());
        }
        lo = hi;
    }
    let memory = Tensor::new(vec![keys.len(), w], memory)?;
    let inputs = StepInputs {
        current: emb.clone(),
        history: Tensor::new(vec![hist_rows as usize, d], hist)?,
        history_idx,
        memory: memory.clone(),
        pool: memory.clone(),
        others,
    };
    let out = policy.step_values(&inputs)?;
    Ok(keys
        .iter()
        .enumerate()
        .map(|(r, &(s, a))| ActRow {
            slot: base + s,
            agent: a,
            logits: out.logits.row(r).to_vec(),
            value: out.values[r],
            memory: memory.data()[r * w..(r + 1) * w].to_vec(),
            next_memory: out.next_memory.data()[r * w..(r + 1) * w].to_vec(),
            embedding: emb.row(r).to_vec(),
        })
        .collect())
}

/// Evaluates every active agent of every slot. Slots are split into
/// `threads` contiguous chunks; results do not depend on the split.
pub fn act_batch(policy: &Policy, slots: &[EnvSlot], threads: usize) -> Result<Vec<ActRow>, PolicyError> {
    let threads = threads.clamp(1, slots.len().max(1));
    if threads == 1 {
        return act_chunk(policy, slots, 0);
    }
    let chunk = slots.len().div_ceil(threads);
    let results: Vec<Result<Vec<ActRow>, PolicyError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| scope.spawn(move || act_chunk(policy, part, i * chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Categorical draw from logits; returns the action index and its log-prob.
pub fn sample_action(logits: &[f64], rng: &mut ChaCha8Rng) -> (usize, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let u: f64 = rng.random::<f64>() * z;
    let mut acc = 0.0;
    let mut pick = logits.len() - 1;
    for (i, l) in logits.iter().enumerate() {
        acc += (l - m).exp();
        if u < acc {
            pick = i;
            break;
        }
    }
    (pick, logits[pick] - lse)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampling_follows_the_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0, (3.0f64).ln(), -50.0, 0.0, 0.0];
        let mut counts = [0usize; 5];
        for _ in 0..60_000 {
            counts[sample_action(&logits, &mut rng).0] += 1;
        }
        // probabilities 1/6, 1/2, ~0, 1/6, 1/6
        assert!((counts[1] as f64 / 60_000.0 - 0.5).abs() < 0.01);
        assert!(counts[2] < 5);
        let (a, lp) = sample_action(&[5.0, 5.0], &mut rng);
        assert!(a < 2 && (lp - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

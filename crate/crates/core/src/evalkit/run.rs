use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gridenv::{Action, EnvConfig, EnvState, Mode, Observation};
use crate::maps::{sample_bottleneck_agents, BottleneckSpec};
use crate::policy::Policy;
use crate::trainer::{act_batch, argmax, mix_seed, sample_action, EnvSlot, TaskSet};

use super::metrics::{csr, isr, soc, throughput, EpisodeRecord};
use super::report::{aggregate, MetricReport};
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Take the most likely action instead of sampling.
    pub greedy: bool,
    pub record_memory: bool,
    pub threads: usize,
    /// Episodes stepped together.
    pub parallel: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { greedy: false, record_memory: false, threads: 1, parallel: 64 }
    }
}

/// A prepared episode: environment after reset plus the action seed.
#[derive(Debug, Clone)]
pub struct EpisodeStart {
    pub map: String,
    pub env: EnvState,
    pub obs: Vec<Option<Observation>>,
    pub seed: u64,
}

struct Running {
    idx: usize,
    record: EpisodeRecord,
    clock: Instant,
}

fn snapshot(env: &EnvState) -> (Vec<crate::gridenv::Cell>, Vec<bool>) {
    (env.agents.iter().map(|a| a.position).collect(), env.agents.iter().map(|a| a.active).collect())
}

fn begin(idx: usize, start: &EpisodeStart, record_memory: bool) -> Running {
    let (pos, act) = snapshot(&start.env);
    let e = &start.env;
    Running {
        idx,
        record: EpisodeRecord {
            map: start.map.clone(),
            mode: e.mode,
            agents: e.num_agents(),
            obs_size: e.obs_size,
            episode_length: e.episode_length,
            steps: 0,
            arrivals: Vec::new(),
            positions: vec![pos],
            active: vec![act],
            memory: record_memory.then(Vec::new),
            goals_reached: 0,
            runtime_secs: 0.0,
        },
        clock: Instant::now(),
    }
}

/// Plays every episode to the end. Records come back in input order and do
/// not depend on `parallel` or `threads`.
pub fn run_episodes(policy: &Policy, starts: Vec<EpisodeStart>, opts: &EvalOptions) -> Result<Vec<EpisodeRecord>, EvalError> {
    let total = starts.len();
    let mut done: Vec<Option<EpisodeRecord>> = vec![None; total];
    let mut queue = starts.into_iter().enumerate();
    let mut slots: Vec<EnvSlot> = Vec::new();
    let mut running: Vec<Running> = Vec::new();
    let fill = |slots: &mut Vec<EnvSlot>, running: &mut Vec<Running>, queue: &mut dyn Iterator<Item = (usize, EpisodeStart)>| {
        while slots.len() < opts.parallel.max(1) {
            let Some((i, s)) = queue.next() else { break };
            running.push(begin(i, &s, opts.record_memory));
            slots.push(EnvSlot::new(policy, s.env, s.obs, ChaCha8Rng::seed_from_u64(s.seed)));
        }
    };
    fill(&mut slots, &mut running, &mut queue);
    while !slots.is_empty() {
        let rows = act_batch(policy, &slots, opts.threads)?;
        let mut start = 0;
        for (s, slot) in slots.iter_mut().enumerate() {
            let end = start + rows[start..].iter().take_while(|r| r.slot == s).count();
            let mut actions = Vec::with_capacity(end - start);
            let mut mem = vec![None; slot.env.num_agents()];
            for row in &rows[start..end] {
                let a = if opts.greedy { argmax(&row.logits) } else { sample_action(&row.logits, &mut slot.rng).0 };
                actions.push(Action::from_index(a).expect("five actions"));
                if !row.memory.is_empty() {
                    mem[row.agent] = Some(row.memory.clone());
                }
            }
            let out = slot.env.step(&actions)?;
            for row in &rows[start..end] {
                let a = &mut slot.agents[row.agent];
                a.memory.clone_from(&row.next_memory);
                a.history.push(row.embedding.clone());
                a.fresh = false;
            }
            slot.obs = out.observations;
            let rec = &mut running[s].record;
            if let Some(m) = &mut rec.memory {
                m.push(mem);
            }
            let (pos, act) = snapshot(&slot.env);
            rec.positions.push(pos);
            rec.active.push(act);
            rec.steps += 1;
            start = end;
        }
        // retire finished episodes, keeping slot order stable
        let mut s = 0;
        while s < slots.len() {
            if slots[s].env.is_done() {
                let slot = slots.remove(s);
                let mut r = running.remove(s);
                r.record.arrivals = slot.env.agents.iter().map(|a| a.arrival_step).collect();
                r.record.goals_reached = slot.env.agents.iter().map(|a| a.goals_reached).sum();
                r.record.runtime_secs = r.clock.elapsed().as_secs_f64();
                done[r.idx] = Some(r.record);
            } else {
                s += 1;
            }
        }
        fill(&mut slots, &mut running, &mut queue);
    }
    Ok(done.into_iter().map(|r| r.expect("every episode finishes")).collect())
}

/// Episode limit used when evaluating corridor length `l`.
pub fn sweep_episode_length(l: usize) -> usize {
    2 * l + 100
}

/// Bottleneck episodes for one corridor length, `per_seed` for each seed.
pub fn bottleneck_starts(
    length: usize,
    room_size: usize,
    obs_size: usize,
    seeds: &[u64],
    per_seed: usize,
) -> Result<Vec<EpisodeStart>, EvalError> {
    let spec = BottleneckSpec { corridor_len: length, room_size };
    let map = Arc::new(spec.build_map()?);
    let cfg = EnvConfig { mode: Mode::Classical, obs_size, episode_length: sweep_episode_length(length) };
    let mut out = Vec::with_capacity(seeds.len() * per_seed);
    for &seed in seeds {
        for e in 0..per_seed {
            let h = mix_seed(&[seed, length as u64, e as u64]);
            let (starts, goals) = sample_bottleneck_agents(&spec, h, false);
            let (env, obs) = EnvState::reset(map.clone(), &starts, &goals, cfg, h)?;
            out.push(EpisodeStart { map: format!("bottleneck-{length}"), env, obs, seed: mix_seed(&[h, 1]) });
        }
    }
    Ok(out)
}

/// Per-seed means of the classical metrics, aggregated over seeds.
pub fn classical_reports(label: &str, records: &[EpisodeRecord], seeds: usize) -> Result<Vec<MetricReport>, EvalError> {
    if seeds == 0 || records.is_empty() || !records.len().is_multiple_of(seeds) {
        return Err(EvalError::Contract(format!("{} records do not split over {seeds} seeds", records.len())));
    }
    let per = records.len() / seeds;
    let mut cols: [Vec<f64>; 3] = Default::default();
    for chunk in records.chunks(per) {
        let mut sums = [0.0; 3];
        for r in chunk {
            sums[0] += csr(r)?;
            sums[1] += isr(r)?;
            sums[2] += soc(r)? as f64;
        }
        for k in 0..3 {
            cols[k].push(sums[k] / per as f64);
        }
    }
    ["csr", "isr", "soc"].iter().zip(&cols).map(|(m, v)| aggregate(label, m, v)).collect()
}

/// Corridor-length generalization: CSR, ISR and SoC per length.
pub fn sweep_corridors(
    policy: &Policy,
    lengths: &[usize],
    seeds: &[u64],
    per_seed: usize,
    room_size: usize,
    opts: &EvalOptions,
) -> Result<(Vec<MetricReport>, Vec<EpisodeRecord>), EvalError> {
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for &l in lengths {
        let starts = bottleneck_starts(l, room_size, policy.config().obs_size, seeds, per_seed)?;
        let records = run_episodes(policy, starts, opts)?;
        reports.extend(classical_reports(&format!("bottleneck-{l}"), &records, seeds.len())?);
        all.extend(records);
    }
    Ok((reports, all))
}

/// Evaluates on each map of a task set. Classical maps report CSR, ISR and
/// SoC; lifelong maps report throughput.
pub fn evaluate_tasks(
    policy: &Policy,
    tasks: &TaskSet,
    seeds: &[u64],
    per_seed: usize,
    opts: &EvalOptions,
) -> Result<(Vec<MetricReport>, Vec<EpisodeRecord>), EvalError> {
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for (m, task) in tasks.maps.iter().enumerate() {
        let mut starts = Vec::new();
        for &seed in seeds {
            for e in 0..per_seed {
                let h = mix_seed(&[seed, m as u64, e as u64]);
                let (env, obs) = tasks.reset_on(m, h)?;
                starts.push(EpisodeStart { map: task.name.clone(), env, obs, seed: mix_seed(&[h, 1]) });
            }
        }
        let records = run_episodes(policy, starts, opts)?;
        match tasks.env.mode {
            Mode::Classical => reports.extend(classical_reports(&task.name, &records, seeds.len())?),
            Mode::Lifelong => {
                let mut per = Vec::new();
                for chunk in records.chunks(per_seed) {
                    let mut s = 0.0;
                    for r in chunk {
                        s += throughput(r)?;
                    }
                    per.push(s / chunk.len() as f64);
                }
                reports.push(aggregate(&task.name, "throughput", &per)?);
            }
        }
        all.extend(records);
    }
    Ok((reports, all))
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gridenv::{EnvConfig, EnvState, GridMap, Observation};
use crate::maps::{sample_bottleneck_agents, BottleneckSpec};

use super::TrainerError;

#[derive(Debug, Clone)]
pub struct TaskMap {
    pub name: String,
    pub map: Arc<GridMap>,
    /// Bottleneck layout, when agents are placed room to room.
    pub bottleneck: Option<BottleneckSpec>,
}

/// A set of maps episodes are drawn from, uniformly.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub maps: Vec<TaskMap>,
    pub agents: usize,
    pub env: EnvConfig,
}

impl TaskSet {
    pub fn bottleneck(lengths: &[usize], room_size: usize, env: EnvConfig) -> Result<Self, TrainerError> {
        let maps = lengths
            .iter()
            .map(|&l| {
                let spec = BottleneckSpec { corridor_len: l, room_size };
                Ok(TaskMap { name: format!("bottleneck-{l}"), map: Arc::new(spec.build_map()?), bottleneck: Some(spec) })
            })
            .collect::<Result<Vec<_>, TrainerError>>()?;
        Self::new(maps, 2, env)
    }

    pub fn new(maps: Vec<TaskMap>, agents: usize, env: EnvConfig) -> Result<Self, TrainerError> {
        if maps.is_empty() {
            return Err(TrainerError::Config("task set has no maps".into()));
        }
        if agents == 0 {
            return Err(TrainerError::Config("task set needs at least one agent".into()));
        }
        for m in &maps {
            if m.bottleneck.is_some() && agents != 2 {
                return Err(TrainerError::Config(format!("{}: bottleneck maps take exactly 2 agents", m.name)));
            }
            if m.bottleneck.is_none() && m.map.free_count() < agents.max(2) {
                return Err(TrainerError::Config(format!("{}: too few free cells for {} agents", m.name, agents)));
            }
        }
        Ok(Self { maps, agents, env })
    }

    /// Starts a new episode. Returns the map index too.
    pub fn reset(&self, seed: u64) -> Result<(EnvState, Vec<Option<Observation>>, usize), TrainerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rng.random_range(0..self.maps.len());
        let (env, obs) = self.reset_on(idx, rng.random())?;
        Ok((env, obs, idx))
    }

    /// Starts an episode on one specific map.
    pub fn reset_on(&self, idx: usize, seed: u64) -> Result<(EnvState, Vec<Option<Observation>>), TrainerError> {
        let task = &self.maps[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (env_seed, place_seed): (u64, u64) = (rng.random(), rng.random());
        Ok(match &task.bottleneck {
            Some(spec) => {
                let (starts, goals) = sample_bottleneck_agents(spec, place_seed, false);
                EnvState::reset(task.map.clone(), &starts, &goals, self.env, env_seed)?
            }
            None => EnvState::reset_random(task.map.clone(), self.agents, self.env, place_seed)?,
        })
    }
}

/// Mixes seed components into one well-spread value.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

//! Partially observable grid environment for classical and lifelong
//! multi-agent pathfinding.

mod collisions;
mod grid;
mod observe;
mod trace;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pathing::{replan_if_needed, shortest_path, DistanceCache, Path, Replan};

pub use collisions::{resolve_collisions, targets_from_actions};
pub use grid::{Action, Cell, GridMap};
pub use observe::{Observation, OBSTACLE, PATH};
pub use trace::{StepTrace, TraceRecorder};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Agents disappear once they reach their goal.
    Classical,
    /// Agents get a fresh goal as soon as they reach the current one.
    Lifelong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub mode: Mode,
    /// Odd observation window side.
    pub obs_size: usize,
    pub episode_length: usize,
}

impl EnvConfig {
    pub fn classical() -> Self {
        Self { mode: Mode::Classical, obs_size: 5, episode_length: 512 }
    }

    pub fn lifelong() -> Self {
        Self { mode: Mode::Lifelong, obs_size: 11, episode_length: 512 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub position: Cell,
    pub goal: Cell,
    pub active: bool,
    pub arrival_step: Option<usize>,
    pub planned_path: Path,
    pub goals_reached: usize,
}

/// Everything that happened to one agent during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub agent: usize,
    pub action: Action,
    pub old_position: Cell,
    pub new_position: Cell,
    /// Goal in force when the action was chosen.
    pub goal: Cell,
    /// Next cell of the planned path before the move, if any.
    pub planned_next: Option<Cell>,
    pub followed_path: bool,
    pub arrived: bool,
    /// Graph distance to `goal` before and after the move.
    pub old_distance: Option<u32>,
    pub new_distance: Option<u32>,
    /// The (possibly new) goal is unreachable from the new position.
    pub unreachable: bool,
}

impl TransitionRecord {
    pub fn moved(&self) -> bool {
        self.old_position != self.new_position
    }

    pub fn moved_towards_goal(&self) -> bool {
        matches!((self.old_distance, self.new_distance), (Some(a), Some(b)) if b < a)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// One per agent; `None` for inactive agents.
    pub observations: Vec<Option<Observation>>,
    /// One per agent that was active when the step began.
    pub records: Vec<TransitionRecord>,
    /// Per agent: left the episode this step, or the episode ended.
    pub agent_done: Vec<bool>,
    pub done: bool,
}

/// Full environment state. Owned by exactly one worker.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub map: Arc<GridMap>,
    pub agents: Vec<AgentState>,
    pub step: usize,
    pub episode_length: usize,
    pub mode: Mode,
    pub obs_size: usize,
    rng: ChaCha8Rng,
    distances: DistanceCache,
}

impl EnvState {
    pub fn reset(
        map: Arc<GridMap>,
        starts: &[Cell],
        goals: &[Cell],
        config: EnvConfig,
        seed: u64,
    ) -> Result<(EnvState, Vec<Option<Observation>>), EnvError> {
        if starts.len() != goals.len() || starts.is_empty() {
            return Err(EnvError::Config(format!("{} starts for {} goals", starts.len(), goals.len())));
        }
        if config.obs_size.is_multiple_of(2) || config.obs_size == 0 {
            return Err(EnvError::Config(format!("observation size {} must be odd", config.obs_size)));
        }
        if config.episode_length == 0 {
            return Err(EnvError::Config("episode length must be positive".into()));
        }
        let mut seen = HashSet::new();
        for (i, (&s, &g)) in starts.iter().zip(goals).enumerate() {
            if !map.is_free(s) {
                return Err(EnvError::Config(format!("agent {i} starts on blocked cell {s}")));
            }
            if !map.is_free(g) {
                return Err(EnvError::Config(format!("agent {i} has its goal on blocked cell {g}")));
            }
            if !seen.insert(s) {
                return Err(EnvError::Config(format!("duplicate start {s}")));
            }
        }
        let mut state = EnvState {
            agents: starts
                .iter()
                .zip(goals)
                .map(|(&s, &g)| AgentState {
                    position: s,
                    goal: g,
                    active: true,
                    arrival_step: None,
                    planned_path: Vec::new(),
                    goals_reached: 0,
                })
                .collect(),
            map,
            step: 0,
            episode_length: config.episode_length,
            mode: config.mode,
            obs_size: config.obs_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            distances: DistanceCache::new(),
        };
        for i in 0..state.agents.len() {
            if state.agents[i].position == state.agents[i].goal {
                match state.mode {
                    Mode::Classical => {
                        state.agents[i].active = false;
                        state.agents[i].arrival_step = Some(0);
                    }
                    Mode::Lifelong => state.resample_goal(i),
                }
            }
            let a = &mut state.agents[i];
            replan_if_needed(&mut a.planned_path, a.position, a.goal, &state.map);
        }
        let obs = state.observations();
        Ok((state, obs))
    }

    /// Reset with starts and goals drawn from `seed`: distinct free starts,
    /// goals uniform over free cells other than the agent's start.
    pub fn reset_random(
        map: Arc<GridMap>,
        agents: usize,
        config: EnvConfig,
        seed: u64,
    ) -> Result<(EnvState, Vec<Option<Observation>>), EnvError> {
        let free = map.free_cells();
        if free.len() < agents.max(2) {
            return Err(EnvError::Config(format!("{} free cells for {} agents", free.len(), agents)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts: Vec<Cell> = free.choose_multiple(&mut rng, agents).copied().collect();
        let goals: Vec<Cell> = starts
            .iter()
            .map(|&s| loop {
                let g = free[rng.random_range(0..free.len())];
                if g != s {
                    break g;
                }
            })
            .collect();
        let env_seed = rng.random();
        Self::reset(map, &starts, &goals, config, env_seed)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn active_count(&self) -> usize {
        self.agents.iter().filter(|a| a.active).count()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.episode_length || (self.mode == Mode::Classical && self.active_count() == 0)
    }

    pub fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        match self.agents.get(agent) {
            Some(a) if a.active => Ok(observe::build_observation(self, agent)),
            Some(_) => Err(EnvError::Contract(format!("agent {agent} is inactive"))),
            None => Err(EnvError::Contract(format!("no agent {agent}"))),
        }
    }

    pub fn observations(&self) -> Vec<Option<Observation>> {
        (0..self.agents.len())
            .map(|i| self.agents[i].active.then(|| observe::build_observation(self, i)))
            .collect()
    }

    fn resample_goal(&mut self, i: usize) {
        let pos = self.agents[i].position;
        let free = self.map.free_count();
        if free < 2 {
            return;
        }
        loop {
            let idx = self.rng.random_range(0..self.map.width() * self.map.height());
            let c = self.map.cell_at(idx);
            if c != pos && self.map.is_free(c) {
                self.agents[i].goal = c;
                return;
            }
        }
    }

    /// Advances one step. `actions` holds one action per active agent, in
    /// agent order.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutput, EnvError> {
        if self.is_done() {
            return Err(EnvError::Contract("episode already finished".into()));
        }
        let active: Vec<usize> = (0..self.agents.len()).filter(|&i| self.agents[i].active).collect();
        if actions.len() != active.len() {
            return Err(EnvError::Contract(format!(
                "{} actions for {} active agents",
                actions.len(),
                active.len()
            )));
        }
        let positions: Vec<Cell> = active.iter().map(|&i| self.agents[i].position).collect();
        let targets = targets_from_actions(&positions, actions);
        let resolved = resolve_collisions(&self.map, &positions, &targets);

        self.step += 1;
        let mut records = Vec::with_capacity(active.len());
        let mut agent_done = vec![false; self.agents.len()];
        for (k, &i) in active.iter().enumerate() {
            let goal = self.agents[i].goal;
            let field = self.distances.field(&self.map, goal);
            let planned_next = self.agents[i].planned_path.get(1).copied();
            let new_pos = resolved[k];
            let arrived = new_pos == goal;
            self.agents[i].position = new_pos;
            let mut record = TransitionRecord {
                agent: i,
                action: actions[k],
                old_position: positions[k],
                new_position: new_pos,
                goal,
                planned_next,
                followed_path: planned_next == Some(new_pos),
                arrived,
                old_distance: field.get(positions[k]),
                new_distance: field.get(new_pos),
                unreachable: false,
            };
            if arrived {
                self.agents[i].goals_reached += 1;
                match self.mode {
                    Mode::Classical => {
                        let a = &mut self.agents[i];
                        a.active = false;
                        a.arrival_step = Some(self.step);
                        a.planned_path.clear();
                        agent_done[i] = true;
                    }
                    Mode::Lifelong => self.resample_goal(i),
                }
            }
            let a = &mut self.agents[i];
            if a.active && replan_if_needed(&mut a.planned_path, a.position, a.goal, &self.map) == Replan::Unreachable {
                record.unreachable = true;
            }
            records.push(record);
        }
        let done = self.is_done();
        if done {
            for &i in &active {
                agent_done[i] = true;
            }
        }
        Ok(StepOutput { observations: self.observations(), records, agent_done, done })
    }

    /// Fresh A* path for an agent, ignoring its cached plan.
    pub fn shortest_path_for(&self, agent: usize) -> Option<Path> {
        let a = &self.agents[agent];
        shortest_path(&self.map, a.position, a.goal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_env(starts: &[Cell], goals: &[Cell], w: usize, h: usize) -> (EnvState, Vec<Option<Observation>>) {
        EnvState::reset(Arc::new(GridMap::open(w, h)), starts, goals, EnvConfig::classical(), 1).unwrap()
    }

    #[test]
    fn step_right_moves_one_column() {
        let (mut env, _) = open_env(&[Cell::new(2, 2)], &[Cell::new(0, 0)], 5, 5);
        let out = env.step(&[Action::Right]).unwrap();
        assert_eq!(env.agents[0].position, Cell::new(2, 3));
        assert_eq!(out.records[0].new_position, Cell::new(2, 3));
        assert_eq!(env.step, 1);
    }

    #[test]
    fn moving_into_obstacle_holds() {
        let map = Arc::new(GridMap::from_ascii(&["..@", "..."]).unwrap());
        let (mut env, _) =
            EnvState::reset(map, &[Cell::new(0, 1)], &[Cell::new(1, 0)], EnvConfig::classical(), 0).unwrap();
        env.step(&[Action::Right]).unwrap();
        assert_eq!(env.agents[0].position, Cell::new(0, 1));
    }

    #[test]
    fn swap_is_blocked() {
        let (mut env, _) = open_env(&[Cell::new(0, 0), Cell::new(0, 1)], &[Cell::new(0, 4), Cell::new(0, 3)], 5, 1);
        env.step(&[Action::Right, Action::Left]).unwrap();
        assert_eq!(env.agents[0].position, Cell::new(0, 0));
        assert_eq!(env.agents[1].position, Cell::new(0, 1));
    }

    #[test]
    fn start_on_obstacle_is_config_error() {
        let map = Arc::new(GridMap::from_ascii(&[".@"]).unwrap());
        let err = EnvState::reset(map, &[Cell::new(0, 1)], &[Cell::new(0, 0)], EnvConfig::classical(), 0);
        assert!(matches!(err, Err(EnvError::Config(_))));
    }

    #[test]
    fn duplicate_starts_rejected() {
        let map = Arc::new(GridMap::open(3, 3));
        let err = EnvState::reset(
            map,
            &[Cell::new(0, 0), Cell::new(0, 0)],
            &[Cell::new(2, 2), Cell::new(1, 1)],
            EnvConfig::classical(),
            0,
        );
        assert!(matches!(err, Err(EnvError::Config(_))));
    }

    #[test]
    fn action_count_mismatch_is_contract_error() {
        let (mut env, _) = open_env(&[Cell::new(0, 0)], &[Cell::new(0, 2)], 3, 1);
        assert!(matches!(env.step(&[]), Err(EnvError::Contract(_))));
    }

    #[test]
    fn classical_arrival_deactivates_and_ends() {
        let (mut env, _) = open_env(&[Cell::new(0, 0)], &[Cell::new(0, 1)], 3, 1);
        let out = env.step(&[Action::Right]).unwrap();
        assert!(out.records[0].arrived);
        assert!(!env.agents[0].active);
        assert_eq!(env.agents[0].arrival_step, Some(1));
        assert!(out.done && env.is_done());
        assert!(out.observations[0].is_none());
        assert!(env.step(&[]).is_err());
    }

    #[test]
    fn lifelong_arrival_resamples_goal() {
        let cfg = EnvConfig { mode: Mode::Lifelong, obs_size: 5, episode_length: 10 };
        let (mut env, _) =
            EnvState::reset(Arc::new(GridMap::open(4, 4)), &[Cell::new(0, 0)], &[Cell::new(0, 1)], cfg, 3).unwrap();
        let out = env.step(&[Action::Right]).unwrap();
        assert!(out.records[0].arrived);
        assert!(env.agents[0].active);
        assert_ne!(env.agents[0].goal, Cell::new(0, 1));
        assert_ne!(env.agents[0].goal, env.agents[0].position);
        assert_eq!(env.agents[0].goals_reached, 1);
        assert_eq!(env.agents[0].planned_path.last(), Some(&env.agents[0].goal));
    }

    #[test]
    fn lifelong_reset_is_seeded() {
        let map = Arc::new(GridMap::open(9, 9));
        let (a, _) = EnvState::reset_random(map.clone(), 4, EnvConfig::lifelong(), 42).unwrap();
        let (b, _) = EnvState::reset_random(map, 4, EnvConfig::lifelong(), 42).unwrap();
        assert_eq!(a.agents, b.agents);
    }

    #[test]
    fn followed_path_and_distances() {
        let (mut env, _) = open_env(&[Cell::new(0, 0)], &[Cell::new(0, 3)], 4, 1);
        let out = env.step(&[Action::Right]).unwrap();
        let r = &out.records[0];
        assert!(r.followed_path && r.moved_towards_goal());
        assert_eq!((r.old_distance, r.new_distance), (Some(3), Some(2)));
        let out = env.step(&[Action::Left]).unwrap();
        assert!(!out.records[0].followed_path && !out.records[0].moved_towards_goal());
    }

    #[test]
    fn observation_contents() {
        let (env, obs) = open_env(&[Cell::new(2, 0), Cell::new(2, 2)], &[Cell::new(0, 4), Cell::new(4, 4)], 5, 5);
        let o0 = obs[0].as_ref().unwrap();
        // left wall padding
        for r in 0..5 {
            assert_eq!(o0.get(0, r, 0), OBSTACLE);
            assert_eq!(o0.get(0, r, 1), OBSTACLE);
        }
        // other agent two cells right
        assert_eq!(o0.get(1, 2, 4), 1);
        assert_eq!(o0.channel(1).iter().filter(|&&v| v != 0).count(), 1);
        let o1 = env.observe(1).unwrap();
        assert_eq!(o1.get(1, 2, 0), 1);
        assert_eq!(o1.channel(1).iter().filter(|&&v| v != 0).count(), 1);
    }
}

//! WebAssembly bindings for the browser demo. Everything crosses the
//! boundary as JSON strings.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use srmt::gridenv::{Action, Cell, EnvConfig, EnvState, GridMap, Mode};
use srmt::maps::{gen_maze, gen_random, sample_bottleneck_agents, BottleneckSpec, MapDoc, MapMeta};
use srmt::pathing::shortest_path;
use srmt::policy::{CoreKind, Policy, PolicyConfig};
use srmt::trainer::{act_batch, sample_action, EnvSlot};

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

fn map_from_json(text: &str) -> Result<(MapDoc, GridMap), JsError> {
    let doc = MapDoc::from_json(text).map_err(js)?;
    let grid = doc.to_grid().map_err(js)?;
    Ok((doc, grid))
}

/// Map document JSON. `kind` is `bottleneck` (`a` = corridor length),
/// `random` (`a` = side, `b` = density) or `maze` (`a` = side).
#[wasm_bindgen]
pub fn generate_map(kind: &str, a: u32, b: f64, seed: u32) -> Result<String, JsError> {
    let a = a as usize;
    let seed = u64::from(seed);
    let (map, meta) = match kind {
        "bottleneck" => {
            let spec = BottleneckSpec::new(a);
            (spec.build_map().map_err(js)?, MapMeta::Bottleneck { corridor_len: a, room_size: spec.room_size })
        }
        "random" => (gen_random(a, a, b, seed).map_err(js)?, MapMeta::Random { density: b, seed }),
        "maze" => (gen_maze(a, a, seed).map_err(js)?, MapMeta::Maze { seed }),
        other => return Err(JsError::new(&format!("unknown map kind `{other}`"))),
    };
    Ok(MapDoc::from_grid(&map, Some(format!("{kind}-{a}")), Some(meta)).to_json())
}

/// Shortest path as `[[row, col], ...]`, or `null` when unreachable.
#[wasm_bindgen]
pub fn astar(map_json: &str, from_row: u32, from_col: u32, to_row: u32, to_col: u32) -> Result<String, JsError> {
    let (_, grid) = map_from_json(map_json)?;
    let from = Cell::new(from_row as usize, from_col as usize);
    let to = Cell::new(to_row as usize, to_col as usize);
    for c in [from, to] {
        if !grid.is_free(c) {
            return Err(JsError::new(&format!("({}, {}) is not a free cell", c.row, c.col)));
        }
    }
    let path = shortest_path(&grid, from, to).map(|p| p.iter().map(|c| [c.row, c.col]).collect::<Vec<_>>());
    serde_json::to_string(&path).map_err(js)
}

#[derive(Serialize)]
struct Frame {
    step: usize,
    episode_length: usize,
    positions: Vec<[usize; 2]>,
    goals: Vec<[usize; 2]>,
    active: Vec<bool>,
    arrivals: Vec<Option<usize>>,
    done: bool,
}

/// One classical episode driven by a shared policy.
#[wasm_bindgen]
pub struct Episode {
    policy: Policy,
    slot: EnvSlot,
}

#[wasm_bindgen]
impl Episode {
    /// Untrained policy of the given core kind. Bottleneck maps place two
    /// agents room to room; other maps place `agents` at random.
    #[wasm_bindgen(constructor)]
    pub fn new(map_json: &str, agents: u32, core: &str, seed: u32) -> Result<Episode, JsError> {
        let kind: CoreKind = core.parse().map_err(js)?;
        let mut cfg = PolicyConfig::mapf(kind);
        cfg.init_seed = u64::from(seed);
        let policy = Policy::new(cfg).map_err(js)?;
        Self::start(policy, map_json, agents as usize, u64::from(seed))
    }

    /// Same, with parameters from checkpoint bytes.
    pub fn from_checkpoint(bytes: &[u8], map_json: &str, agents: u32, seed: u32) -> Result<Episode, JsError> {
        let (policy, _) = Policy::read(bytes).map_err(js)?;
        Self::start(policy, map_json, agents as usize, u64::from(seed))
    }

    fn start(policy: Policy, map_json: &str, agents: usize, seed: u64) -> Result<Episode, JsError> {
        let (doc, grid) = map_from_json(map_json)?;
        let map = Arc::new(grid);
        let bottleneck = doc.meta.as_ref().and_then(|m| m.bottleneck());
        let episode_length = bottleneck.map_or(256, |b| 2 * b.corridor_len + 100);
        let env_cfg = EnvConfig { mode: Mode::Classical, obs_size: policy.config().obs_size, episode_length };
        let (env, obs) = match bottleneck {
            Some(spec) => {
                let (starts, goals) = sample_bottleneck_agents(&spec, seed, false);
                EnvState::reset(map, &starts, &goals, env_cfg, seed).map_err(js)?
            }
            None => EnvState::reset_random(map, agents, env_cfg, seed).map_err(js)?,
        };
        let slot = EnvSlot::new(&policy, env, obs, ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
        Ok(Episode { policy, slot })
    }

    /// Advances one step and returns the new frame.
    pub fn step(&mut self) -> Result<String, JsError> {
        if !self.slot.env.is_done() {
            let rows = act_batch(&self.policy, std::slice::from_ref(&self.slot), 1).map_err(js)?;
            let mut actions = Vec::with_capacity(rows.len());
            for row in &rows {
                let (a, _) = sample_action(&row.logits, &mut self.slot.rng);
                actions.push(Action::from_index(a).expect("five actions"));
            }
            let out = self.slot.env.step(&actions).map_err(js)?;
            for row in &rows {
                let a = &mut self.slot.agents[row.agent];
                a.memory.clone_from(&row.next_memory);
                a.history.push(row.embedding.clone());
                a.fresh = false;
            }
            self.slot.obs = out.observations;
        }
        self.frame()
    }

    pub fn frame(&self) -> Result<String, JsError> {
        let e = &self.slot.env;
        let frame = Frame {
            step: e.step,
            episode_length: e.episode_length,
            positions: e.agents.iter().map(|a| [a.position.row, a.position.col]).collect(),
            goals: e.agents.iter().map(|a| [a.goal.row, a.goal.col]).collect(),
            active: e.agents.iter().map(|a| a.active).collect(),
            arrivals: e.agents.iter().map(|a| a.arrival_step).collect(),
            done: e.is_done(),
        };
        serde_json::to_string(&frame).map_err(js)
    }
}

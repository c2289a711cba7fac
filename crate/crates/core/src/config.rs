//! Experiment configuration: one JSON document naming the task, the policy,
//! the reward and PPO overrides. Every problem found is reported at once.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::gridenv::{EnvConfig, Mode};
use crate::maps::{gen_maze, gen_random, parse_movingai, BottleneckSpec, MapDoc};
use crate::policy::{CoreKind, PolicyConfig};
use crate::rewards::{RewardFn, RewardScheme};
use crate::trainer::{PPOConfig, TaskMap, TaskSet};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
pub struct ConfigError(pub Vec<String>);

/// Where training maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSource {
    /// Either explicit `lengths`, or `count` lengths evenly spaced over
    /// `corridor_min..=corridor_max`.
    Bottleneck {
        #[serde(default)]
        lengths: Option<Vec<usize>>,
        #[serde(default)]
        corridor_min: Option<usize>,
        #[serde(default)]
        corridor_max: Option<usize>,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_room")]
        room_size: usize,
    },
    Random {
        size: usize,
        density: f64,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Maze {
        size: usize,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Map JSON documents or MovingAI `.map` files, relative to the config.
    Files { paths: Vec<PathBuf> },
}

fn default_count() -> usize {
    16
}

fn default_room() -> usize {
    5
}

/// `count` integers evenly spaced over `lo..=hi`, without repeats.
pub fn spaced_lengths(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let n = count.min(hi - lo + 1).max(1);
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + ((i * (hi - lo)) as f64 / (n - 1) as f64).round() as usize).collect()
}

impl MapSource {
    pub fn bottleneck_lengths(&self) -> Result<Option<Vec<usize>>, String> {
        let MapSource::Bottleneck { lengths, corridor_min, corridor_max, count, .. } = self else {
            return Ok(None);
        };
        match (lengths, corridor_min, corridor_max) {
            (Some(l), None, None) if !l.is_empty() => Ok(Some(l.clone())),
            (Some(_), None, None) => Err("maps.lengths is empty".into()),
            (None, Some(lo), Some(hi)) if lo <= hi && *count > 0 => Ok(Some(spaced_lengths(*lo, *hi, *count))),
            (None, Some(lo), Some(hi)) => Err(format!("maps: corridor range {lo}..{hi} with count {count} is empty")),
            _ => Err("maps: give either lengths or corridor_min and corridor_max".into()),
        }
    }

    /// Builds the maps. File paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Vec<TaskMap>, String> {
        let plain = |name: String, map| TaskMap { name, map: Arc::new(map), bottleneck: None };
        match self {
            MapSource::Bottleneck { room_size, .. } => {
                let lengths = self.bottleneck_lengths()?.expect("bottleneck source");
                lengths
                    .iter()
                    .map(|&l| {
                        let spec = BottleneckSpec { corridor_len: l, room_size: *room_size };
                        let map = spec.build_map().map_err(|e| format!("maps: length {l}: {e}"))?;
                        Ok(TaskMap { name: format!("bottleneck-{l}"), map: Arc::new(map), bottleneck: Some(spec) })
                    })
                    .collect()
            }
            MapSource::Random { size, density, count, seed } => (0..*count)
                .map(|i| {
                    let s = seed.wrapping_add(i as u64);
                    gen_random(*size, *size, *density, s)
                        .map(|m| plain(format!("random-{size}-{i}"), m))
                        .map_err(|e| format!("maps: {e}"))
                })
                .collect(),
            MapSource::Maze { size, count, seed } => (0..*count)
                .map(|i| {
                    let s = seed.wrapping_add(i as u64);
                    gen_maze(*size, *size, s).map(|m| plain(format!("maze-{size}-{i}"), m)).map_err(|e| format!("maps: {e}"))
                })
                .collect(),
            MapSource::Files { paths } => paths
                .iter()
                .map(|p| {
                    let path = base.join(p);
                    let text = std::fs::read_to_string(&path).map_err(|e| format!("maps: {}: {e}", path.display()))?;
                    let stem = path.file_stem().map_or("map".into(), |s| s.to_string_lossy().into_owned());
                    if path.extension().is_some_and(|e| e == "map") {
                        let m = parse_movingai(&text).and_then(|m| m.to_grid()).map_err(|e| format!("{}: {e}", path.display()))?;
                        return Ok(plain(stem, m));
                    }
                    let doc = MapDoc::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                    let grid = doc.to_grid().map_err(|e| format!("{}: {e}", path.display()))?;
                    let bottleneck = doc.meta.as_ref().and_then(|m| m.bottleneck());
                    Ok(TaskMap { name: doc.name.clone().unwrap_or(stem), map: Arc::new(grid), bottleneck })
                })
                .collect(),
        }
    }
}

/// A validated experiment. Serializes to the effective configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub maps: MapSource,
    pub agents: usize,
    pub core: CoreKind,
    pub reward: RewardFn,
    pub planner: String,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PPOConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Iterations between checkpoints.
    pub checkpoint_every: u64,
    pub threads: usize,
}

const KEYS: &[&str] = &[
    "name",
    "mode",
    "maps",
    "agents",
    "core",
    "reward",
    "lifelong_goal_bonus",
    "planner",
    "episode_length",
    "policy",
    "ppo",
    "seed",
    "output_dir",
    "checkpoint_every",
    "threads",
];

fn take<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errs: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            errs.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Applies `overrides` key by key onto a preset, then deserializes strictly.
fn merge<T: Serialize + DeserializeOwned>(preset: &T, overrides: Option<Value>, section: &str, errs: &mut Vec<String>) -> Option<T> {
    let mut base = serde_json::to_value(preset).expect("preset serializes");
    match overrides {
        None => {}
        Some(Value::Object(o)) => {
            let obj = base.as_object_mut().expect("preset is an object");
            for (k, v) in o {
                obj.insert(k, v);
            }
        }
        Some(_) => {
            errs.push(format!("{section} must be an object"));
            return None;
        }
    }
    match serde_json::from_value(base) {
        Ok(t) => Some(t),
        Err(e) => {
            errs.push(format!("{section}: {e}"));
            None
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        let Value::Object(obj) = v else {
            return Err(ConfigError(vec!["configuration must be a JSON object".into()]));
        };
        let mut errs = Vec::new();
        for k in obj.keys() {
            if !KEYS.contains(&k.as_str()) {
                errs.push(format!("unknown key `{k}`"));
            }
        }
        for k in ["mode", "maps", "core", "reward", "output_dir"] {
            if !obj.contains_key(k) {
                errs.push(format!("missing key `{k}`"));
            }
        }

        let mode = take::<String>(&obj, "mode", &mut errs).and_then(|m| match m.to_ascii_lowercase().as_str() {
            "classical" => Some(Mode::Classical),
            "lifelong" => Some(Mode::Lifelong),
            other => {
                errs.push(format!("mode: unknown mode `{other}` (classical, lifelong)"));
                None
            }
        });
        let core = take::<String>(&obj, "core", &mut errs).and_then(|c| match c.parse::<CoreKind>() {
            Ok(k) => Some(k),
            Err(e) => {
                errs.push(format!("core: {e}"));
                None
            }
        });
        let scheme = take::<String>(&obj, "reward", &mut errs).and_then(|r| match r.parse::<RewardScheme>() {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(format!("reward: {e}"));
                None
            }
        });
        let bonus = take::<bool>(&obj, "lifelong_goal_bonus", &mut errs).unwrap_or(false);
        let planner = take::<String>(&obj, "planner", &mut errs).unwrap_or_else(|| "astar".into());
        match planner.to_ascii_lowercase().as_str() {
            "astar" | "a*" => {}
            "follower" => errs.push("planner: the follower path decider is not available; use `astar`".into()),
            other => errs.push(format!("planner: unknown planner `{other}` (astar)")),
        }
        let maps = take::<MapSource>(&obj, "maps", &mut errs);
        if let Some(m) = &maps {
            if let Err(e) = m.bottleneck_lengths() {
                errs.push(e);
            }
        }
        let is_bottleneck = matches!(maps, Some(MapSource::Bottleneck { .. }));
        let agents = take::<usize>(&obj, "agents", &mut errs).unwrap_or(2);
        if agents == 0 {
            errs.push("agents must be at least 1".into());
        }
        if is_bottleneck && agents != 2 {
            errs.push(format!("agents: bottleneck maps take exactly 2 agents, got {agents}"));
        }
        let seed = take::<u64>(&obj, "seed", &mut errs).unwrap_or(0);
        let output_dir = take::<PathBuf>(&obj, "output_dir", &mut errs);
        let checkpoint_every = take::<u64>(&obj, "checkpoint_every", &mut errs).unwrap_or(10);
        if checkpoint_every == 0 {
            errs.push("checkpoint_every must be at least 1".into());
        }
        let threads = take::<usize>(&obj, "threads", &mut errs).unwrap_or(1);
        if threads == 0 {
            errs.push("threads must be at least 1".into());
        }
        let name = take::<String>(&obj, "name", &mut errs).unwrap_or_else(|| "experiment".into());

        let lifelong = mode == Some(Mode::Lifelong);
        let policy = core.and_then(|c| {
            let preset = if lifelong { PolicyConfig::lmapf(c) } else { PolicyConfig::mapf(c) };
            merge(&preset, obj.get("policy").cloned(), "policy", &mut errs)
        });
        if let Some(p) = &policy {
            if Some(p.core) != core {
                errs.push(format!("policy.core `{}` disagrees with core", p.core.name()));
            }
            errs.extend(p.validate());
        }
        let ppo = merge(&if lifelong { PPOConfig::lmapf() } else { PPOConfig::mapf() }, obj.get("ppo").cloned(), "ppo", &mut errs);
        if let Some(p) = &ppo {
            errs.extend(p.validate());
        }
        let default_env = if lifelong { EnvConfig::lifelong() } else { EnvConfig::classical() };
        let episode_length = take::<usize>(&obj, "episode_length", &mut errs).unwrap_or(default_env.episode_length);
        if episode_length == 0 {
            errs.push("episode_length must be at least 1".into());
        }
        if let (Some(s), Some(Mode::Lifelong)) = (scheme, mode) {
            if s != RewardScheme::LifelongFollow {
                errs.push(format!("reward: lifelong mode uses lifelong_follow, got {}", s.name()));
            }
        }
        if let (Some(s), Some(Mode::Classical)) = (scheme, mode) {
            if s == RewardScheme::LifelongFollow {
                errs.push("reward: lifelong_follow needs lifelong mode".into());
            }
        }
        if is_bottleneck && lifelong {
            errs.push("maps: bottleneck maps are for classical mode".into());
        }
        if bonus && !lifelong {
            errs.push("lifelong_goal_bonus needs lifelong mode".into());
        }

        if !errs.is_empty() {
            return Err(ConfigError(errs));
        }
        let (mode, policy) = (mode.expect("checked"), policy.expect("checked"));
        Ok(Self {
            name,
            mode,
            maps: maps.expect("checked"),
            agents,
            core: core.expect("checked"),
            reward: RewardFn { scheme: scheme.expect("checked"), lifelong_goal_bonus: bonus },
            planner: "astar".into(),
            env: EnvConfig { mode, obs_size: policy.obs_size, episode_length },
            policy,
            ppo: ppo.expect("checked"),
            seed,
            output_dir: output_dir.expect("checked"),
            checkpoint_every,
            threads,
        })
    }

    /// Effective configuration as JSON, for provenance copies.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Round trip through [`Self::to_json`].
    pub fn from_effective(text: &str) -> Result<Self, ConfigError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| ConfigError(vec![format!("not valid JSON: {e}")]))?;
        if let Value::Object(o) = &mut v {
            // flatten the derived fields back into the input form
            if let Some(Value::Object(r)) = o.remove("reward") {
                o.insert("reward".into(), r.get("scheme").cloned().unwrap_or(Value::Null));
                o.insert("lifelong_goal_bonus".into(), r.get("lifelong_goal_bonus").cloned().unwrap_or(Value::Bool(false)));
            }
            if let Some(Value::Object(env)) = o.remove("env") {
                o.insert("episode_length".into(), env.get("episode_length").cloned().unwrap_or(Value::Null));
            }
        }
        Self::from_value(v)
    }

    pub fn tasks(&self, base: &Path) -> Result<TaskSet, ConfigError> {
        let maps = self.maps.build(base).map_err(|e| ConfigError(vec![e]))?;
        TaskSet::new(maps, self.agents, self.env).map_err(|e| ConfigError(vec![e.to_string()]))
    }
}

use serde::{Deserialize, Serialize};

use crate::gridenv::{Cell, GridMap, Mode};
use crate::pathing::{path_cost, shortest_path};

use super::EvalError;

/// What an evaluation episode leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub map: String,
    pub mode: Mode,
    pub agents: usize,
    pub obs_size: usize,
    /// Step limit.
    pub episode_length: usize,
    /// Steps actually taken.
    pub steps: usize,
    pub arrivals: Vec<Option<usize>>,
    /// `steps + 1` snapshots, the first before any move.
    pub positions: Vec<Vec<Cell>>,
    pub active: Vec<Vec<bool>>,
    /// Per step and agent, the memory that step read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<Vec<Vec<Option<Vec<f64>>>>>,
    pub goals_reached: usize,
    pub runtime_secs: f64,
}

impl EpisodeRecord {
    fn classical(&self, op: &str) -> Result<(), EvalError> {
        match self.mode {
            Mode::Classical => Ok(()),
            Mode::Lifelong => Err(EvalError::Contract(format!("{op} needs a classical episode"))),
        }
    }
}

pub fn cooperative_success(arrivals: &[Option<usize>]) -> f64 {
    if arrivals.iter().all(Option::is_some) {
        1.0
    } else {
        0.0
    }
}

pub fn individual_success(arrivals: &[Option<usize>]) -> f64 {
    if arrivals.is_empty() {
        return 0.0;
    }
    arrivals.iter().filter(|a| a.is_some()).count() as f64 / arrivals.len() as f64
}

/// Agents that never arrive are charged the full episode length.
pub fn sum_of_costs(arrivals: &[Option<usize>], episode_length: usize) -> usize {
    arrivals.iter().map(|a| a.unwrap_or(episode_length)).sum()
}

pub fn csr(rec: &EpisodeRecord) -> Result<f64, EvalError> {
    rec.classical("csr")?;
    Ok(cooperative_success(&rec.arrivals))
}

pub fn isr(rec: &EpisodeRecord) -> Result<f64, EvalError> {
    rec.classical("isr")?;
    Ok(individual_success(&rec.arrivals))
}

pub fn soc(rec: &EpisodeRecord) -> Result<usize, EvalError> {
    rec.classical("soc")?;
    Ok(sum_of_costs(&rec.arrivals, rec.episode_length))
}

pub fn throughput(rec: &EpisodeRecord) -> Result<f64, EvalError> {
    if rec.mode != Mode::Lifelong {
        return Err(EvalError::Contract("throughput needs a lifelong episode".into()));
    }
    if rec.episode_length == 0 {
        return Ok(0.0);
    }
    Ok(rec.goals_reached as f64 / rec.episode_length as f64)
}

/// Local over global agent density, averaged over every (agent, step) the
/// agent acted in. The viewer's own cell is left out on both sides: locally,
/// other agents over the other free cells of its window; globally, the
/// other active agents over the other free cells of the map.
pub fn congestion(map: &GridMap, episodes: &[EpisodeRecord]) -> Result<f64, EvalError> {
    let free = map.free_count();
    let (mut sum, mut count) = (0.0, 0usize);
    for rec in episodes {
        let r = (rec.obs_size / 2) as isize;
        for t in 0..rec.steps {
            let (pos, act) = (&rec.positions[t], &rec.active[t]);
            let live: Vec<Cell> = (0..pos.len()).filter(|&i| act[i]).map(|i| pos[i]).collect();
            for &me in &live {
                count += 1;
                if live.len() < 2 || free < 2 {
                    continue;
                }
                let global = (live.len() - 1) as f64 / (free - 1) as f64;
                let mut window_free = 0usize;
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (row, col) = (me.row as isize + dr, me.col as isize + dc);
                        if (dr, dc) != (0, 0) && !map.blocked_at(row, col) {
                            window_free += 1;
                        }
                    }
                }
                let seen = live
                    .iter()
                    .filter(|&&o| o != me && o.row.abs_diff(me.row) as isize <= r && o.col.abs_diff(me.col) as isize <= r)
                    .count();
                if window_free > 0 {
                    sum += seen as f64 / window_free as f64 / global;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// 1 when the single agent reached its goal in exactly the shortest-path
/// number of moves.
pub fn pathfinding_optimal(map: &GridMap, rec: &EpisodeRecord, goal: Cell) -> Result<f64, EvalError> {
    if rec.agents != 1 {
        return Err(EvalError::Contract(format!("pathfinding_optimal needs one agent, got {}", rec.agents)));
    }
    let Some(start) = rec.positions.first().map(|p| p[0]) else {
        return Err(EvalError::Contract("episode has no positions".into()));
    };
    let arrived = rec.positions.iter().any(|p| p[0] == goal) || rec.arrivals[0].is_some();
    let moves = rec.positions.windows(2).filter(|w| w[0][0] != w[1][0]).count();
    let best = shortest_path(map, start, goal).map(|p| path_cost(&p));
    Ok(match best {
        Some(c) if arrived && moves == c => 1.0,
        _ => 0.0,
    })
}

/// Mean over non-baseline points of relative agents over relative runtime.
/// The point with the fewest agents is the baseline.
pub fn scalability(points: &[(usize, f64)]) -> Result<f64, EvalError> {
    if points.len() < 2 {
        return Err(EvalError::Contract("scalability needs at least two agent counts".into()));
    }
    let base = points.iter().min_by_key(|p| p.0).expect("non-empty");
    if base.0 == 0 || base.1.is_nan() || base.1 <= 0.0 {
        return Err(EvalError::Contract("baseline needs agents and a positive runtime".into()));
    }
    let mut acc = 0.0;
    let mut n = 0;
    for p in points {
        if std::ptr::eq(p, base) {
            continue;
        }
        if p.1.is_nan() || p.1 <= 0.0 {
            return Err(EvalError::Contract(format!("runtime for {} agents must be positive", p.0)));
        }
        acc += (p.0 as f64 / base.0 as f64) / (p.1 / base.1);
        n += 1;
    }
    Ok(acc / n as f64)
}

/// Own throughput relative to the best of own and references.
pub fn performance_ratio(own: f64, references: &[f64]) -> f64 {
    let best = references.iter().copied().fold(own, f64::max);
    if best == 0.0 {
        return 1.0;
    }
    own / best
}

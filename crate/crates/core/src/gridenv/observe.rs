use serde::{Deserialize, Serialize};

use super::{Cell, EnvState};

pub const OBSTACLE: i8 = -1;
pub const PATH: i8 = 1;

/// Egocentric `3 × m × m` view centered on the agent.
///
/// Channel 0 holds obstacles (−1) and the agent's planned path (+1),
/// channel 1 other active agents, channel 2 goals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    size: usize,
    data: Vec<i8>,
}

impl Observation {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0; 3 * size * size] }
    }

    pub fn from_data(size: usize, data: Vec<i8>) -> Option<Self> {
        (data.len() == 3 * size * size).then_some(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn channel(&self, ch: usize) -> &[i8] {
        let n = self.size * self.size;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Value at window coordinates (row, col), `(0, 0)` being top-left.
    pub fn get(&self, ch: usize, row: usize, col: usize) -> i8 {
        self.data[ch * self.size * self.size + row * self.size + col]
    }

    fn set(&mut self, ch: usize, row: usize, col: usize, v: i8) {
        let s = self.size;
        self.data[ch * s * s + row * s + col] = v;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn write_f64(&self, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(&self.data) {
            *o = f64::from(v);
        }
    }
}

/// Window offset of `target` relative to `center`, if inside radius `r`.
fn window_pos(center: Cell, target: Cell, r: usize) -> Option<(usize, usize)> {
    let dr = target.row as isize - center.row as isize;
    let dc = target.col as isize - center.col as isize;
    let r = r as isize;
    (dr.abs() <= r && dc.abs() <= r).then(|| ((dr + r) as usize, (dc + r) as usize))
}

/// Projects an outside offset onto the window border along the straight line.
fn project_to_border(dr: isize, dc: isize, r: usize) -> (usize, usize) {
    let span = dr.abs().max(dc.abs()) as f64;
    let s = r as f64 / span;
    let pr = (dr as f64 * s).round() as isize;
    let pc = (dc as f64 * s).round() as isize;
    let r = r as isize;
    ((pr.clamp(-r, r) + r) as usize, (pc.clamp(-r, r) + r) as usize)
}

pub(super) fn build_observation(state: &EnvState, agent: usize) -> Observation {
    let m = state.obs_size;
    let r = m / 2;
    let me = &state.agents[agent];
    let center = me.position;
    let mut obs = Observation::zeros(m);
    for wr in 0..m {
        for wc in 0..m {
            let row = center.row as isize + wr as isize - r as isize;
            let col = center.col as isize + wc as isize - r as isize;
            if state.map.blocked_at(row, col) {
                obs.set(0, wr, wc, OBSTACLE);
            }
        }
    }
    for &c in me.planned_path.iter().skip(1) {
        if let Some((wr, wc)) = window_pos(center, c, r) {
            obs.set(0, wr, wc, PATH);
        }
    }
    for (j, other) in state.agents.iter().enumerate() {
        if j == agent || !other.active {
            continue;
        }
        if let Some((wr, wc)) = window_pos(center, other.position, r) {
            obs.set(1, wr, wc, 1);
        }
        if let Some((wr, wc)) = window_pos(center, other.goal, r) {
            obs.set(2, wr, wc, 1);
        }
    }
    let (wr, wc) = match window_pos(center, me.goal, r) {
        Some(p) => p,
        None => project_to_border(
            me.goal.row as isize - center.row as isize,
            me.goal.col as isize - center.col as isize,
            r,
        ),
    };
    obs.set(2, wr, wc, 1);
    obs
}

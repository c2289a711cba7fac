use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MapError;
use crate::gridenv::{Cell, GridMap};

/// Two square rooms joined by a one-cell-wide corridor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub corridor_len: usize,
    #[serde(default = "default_room")]
    pub room_size: usize,
}

fn default_room() -> usize {
    5
}

impl BottleneckSpec {
    pub fn new(corridor_len: usize) -> Self {
        Self { corridor_len, room_size: 5 }
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if self.corridor_len < 1 {
            return Err(MapError::Config("corridor_len must be at least 1".into()));
        }
        if self.room_size < 3 {
            return Err(MapError::Config("room_size must be at least 3".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.room_size + self.corridor_len
    }

    pub fn corridor_row(&self) -> usize {
        self.room_size / 2
    }

    pub fn build_map(&self) -> Result<GridMap, MapError> {
        self.validate()?;
        let (w, h) = (self.width(), self.room_size);
        let mut obstacles = vec![false; w * h];
        for r in 0..h {
            if r == self.corridor_row() {
                continue;
            }
            for c in self.room_size..self.room_size + self.corridor_len {
                obstacles[r * w + c] = true;
            }
        }
        GridMap::new(w, h, obstacles).map_err(|e| MapError::Config(e.to_string()))
    }
}

/// Starts and goals for the two bottleneck agents. Agent 0 starts in the left
/// room and targets the right room; agent 1 is mirrored. With `fixed`, the
/// corners are used instead of sampled cells.
pub fn sample_bottleneck_agents(spec: &BottleneckSpec, seed: u64, fixed: bool) -> (Vec<Cell>, Vec<Cell>) {
    let n = spec.room_size;
    let right = n + spec.corridor_len;
    if fixed {
        let starts = vec![Cell::new(0, 0), Cell::new(0, right + n - 1)];
        let goals = vec![Cell::new(n - 1, right + n - 1), Cell::new(n - 1, 0)];
        return (starts, goals);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut room_cell = |offset: usize| Cell::new(rng.random_range(0..n), offset + rng.random_range(0..n));
    let s0 = room_cell(0);
    let s1 = room_cell(right);
    let g0 = loop {
        let c = room_cell(right);
        if c != s1 {
            break c;
        }
    };
    let g1 = loop {
        let c = room_cell(0);
        if c != s0 {
            break c;
        }
    };
    (vec![s0, s1], vec![g0, g1])
}

pub fn gen_bottleneck(spec: &BottleneckSpec, seed: u64) -> Result<(GridMap, Vec<Cell>, Vec<Cell>), MapError> {
    let map = spec.build_map()?;
    let (starts, goals) = sample_bottleneck_agents(spec, seed, false);
    Ok((map, starts, goals))
}

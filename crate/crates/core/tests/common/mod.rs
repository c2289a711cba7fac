#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srmt::gridenv::{Cell, GridMap, Observation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a small absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let fp = f(&xp);
    xp[i] = x[i] - eps;
    let fm = f(&xp);
    (fp - fm) / (2.0 * eps)
}

/// Largest relative error between `analytic` and central differences over
/// every coordinate of `x`.
pub fn check_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..x.len()).map(|i| rel_err(analytic[i], central_diff(f, x, i, 1e-5))).fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Plain breadth-first search distance.
pub fn bfs_distance(map: &GridMap, from: Cell, to: Cell) -> Option<usize> {
    if !map.is_free(from) || !map.is_free(to) {
        return None;
    }
    let mut dist = vec![usize::MAX; map.width() * map.height()];
    let mut q = VecDeque::new();
    dist[map.index(from)] = 0;
    q.push_back(from);
    while let Some(c) = q.pop_front() {
        if c == to {
            return Some(dist[map.index(c)]);
        }
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (r, cc) = (c.row as isize + dr, c.col as isize + dc);
            if map.blocked_at(r, cc) {
                continue;
            }
            let n = Cell::new(r as usize, cc as usize);
            if dist[map.index(n)] == usize::MAX {
                dist[map.index(n)] = dist[map.index(c)] + 1;
                q.push_back(n);
            }
        }
    }
    None
}

/// Random observation with values drawn from each channel's alphabet.
pub fn random_observation(rng: &mut ChaCha8Rng, size: usize) -> Observation {
    let cells = size * size;
    let mut data = vec![0i8; 3 * cells];
    for (i, v) in data.iter_mut().enumerate() {
        let roll: f64 = rng.random();
        *v = match i / cells {
            0 if roll < 0.25 => -1,
            0 if roll < 0.4 => 1,
            1 | 2 if roll < 0.15 => 1,
            _ => 0,
        };
    }
    Observation::from_data(size, data).expect("observation data")
}

/// Brute-force advantage: Σ_k (γλ)^k δ_{t+k}, stopping after a terminal step.
pub fn brute_gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_value(t) } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * delta[k];
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

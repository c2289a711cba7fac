use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MapError;
use crate::gridenv::GridMap;

/// Fraction of remaining interior walls knocked out after carving.
pub const MAZE_PERFORATION: f64 = 0.1;

/// Randomized depth-first maze on an odd-sized grid, perforated to add cycles.
///
/// Rooms sit on even coordinates; walls between two rooms sit on cells with
/// exactly one odd coordinate. Cells with two odd coordinates stay blocked.
pub fn gen_maze(width: usize, height: usize, seed: u64) -> Result<GridMap, MapError> {
    if width.is_multiple_of(2) || height.is_multiple_of(2) {
        return Err(MapError::Config(format!("maze dimensions must be odd, got {width}x{height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rw, rh) = (width.div_ceil(2), height.div_ceil(2));
    let mut blocked = vec![true; width * height];
    let mut visited = vec![false; rw * rh];
    let start = (rng.random_range(0..rh), rng.random_range(0..rw));
    let mut stack = vec![start];
    visited[start.0 * rw + start.1] = true;
    blocked[2 * start.0 * width + 2 * start.1] = false;
    while let Some(&(r, c)) = stack.last() {
        let mut options: Vec<(usize, usize)> = Vec::with_capacity(4);
        if r > 0 {
            options.push((r - 1, c));
        }
        if r + 1 < rh {
            options.push((r + 1, c));
        }
        if c > 0 {
            options.push((r, c - 1));
        }
        if c + 1 < rw {
            options.push((r, c + 1));
        }
        options.retain(|&(nr, nc)| !visited[nr * rw + nc]);
        options.shuffle(&mut rng);
        match options.first() {
            Some(&(nr, nc)) => {
                visited[nr * rw + nc] = true;
                blocked[2 * nr * width + 2 * nc] = false;
                blocked[(r + nr) * width + (c + nc)] = false;
                stack.push((nr, nc));
            }
            None => {
                stack.pop();
            }
        }
    }
    for r in 0..height {
        for c in 0..width {
            if (r % 2 == 1) != (c % 2 == 1) && blocked[r * width + c] && rng.random::<f64>() < MAZE_PERFORATION {
                blocked[r * width + c] = false;
            }
        }
    }
    GridMap::new(width, height, blocked).map_err(|e| MapError::Config(e.to_string()))
}

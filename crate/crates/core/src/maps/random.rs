use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MapError;
use crate::gridenv::GridMap;

/// I.i.d. obstacles at `density`, then the free cells are joined into one
/// component by carving the fewest obstacle cells between components.
pub fn gen_random(width: usize, height: usize, density: f64, seed: u64) -> Result<GridMap, MapError> {
    if !(0.0..=0.5).contains(&density) {
        return Err(MapError::Config(format!("obstacle density {density} outside [0, 0.5]")));
    }
    if width == 0 || height == 0 {
        return Err(MapError::Config("map dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles: Vec<bool> = (0..width * height).map(|_| rng.random::<f64>() < density).collect();
    if obstacles.iter().all(|&b| b) {
        obstacles[(height / 2) * width + width / 2] = false;
    }
    let mut map = GridMap::new(width, height, obstacles).map_err(|e| MapError::Config(e.to_string()))?;
    connect_components(&mut map);
    Ok(map)
}

/// Carves minimal corridors until all free cells form one component.
pub(crate) fn connect_components(map: &mut GridMap) {
    loop {
        let (labels, count) = map.components();
        if count <= 1 {
            return;
        }
        let mut sizes = vec![0usize; count];
        for &l in labels.iter().filter(|&&l| l != usize::MAX) {
            sizes[l] += 1;
        }
        let main = (0..count).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap();

        // 0-1 BFS: stepping onto an obstacle costs one carve.
        let n = labels.len();
        let mut cost = vec![usize::MAX; n];
        let mut parent = vec![usize::MAX; n];
        let mut dq = VecDeque::new();
        for i in 0..n {
            if labels[i] == main {
                cost[i] = 0;
                dq.push_back(i);
            }
        }
        let mut target = None;
        while let Some(i) = dq.pop_front() {
            if labels[i] != usize::MAX && labels[i] != main {
                target = Some(i);
                break;
            }
            let c = map.cell_at(i);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let Some(nb) = c.offset(dr, dc).filter(|&nb| map.in_bounds(nb)) else { continue };
                let ni = map.index(nb);
                let step = usize::from(labels[ni] == usize::MAX);
                if cost[i] + step < cost[ni] {
                    cost[ni] = cost[i] + step;
                    parent[ni] = i;
                    if step == 0 {
                        dq.push_front(ni);
                    } else {
                        dq.push_back(ni);
                    }
                }
            }
        }
        let Some(mut cur) = target else { return };
        while cur != usize::MAX && labels[cur] != main {
            if labels[cur] == usize::MAX {
                map.set_blocked(map.cell_at(cur), false);
            }
            cur = parent[cur];
        }
    }
}

mod common;

use common::{bfs_distance, rng};
use rand::Rng;
use srmt::gridenv::{Cell, GridMap};
use srmt::maps::gen_random;
use srmt::pathing::{path_cost, shortest_path, DistanceField, Path};

fn assert_valid(map: &GridMap, path: &Path, from: Cell, to: Cell) {
    assert_eq!(path.first(), Some(&from));
    assert_eq!(path.last(), Some(&to));
    for w in path.windows(2) {
        assert_eq!(w[0].manhattan(w[1]), 1, "non-adjacent step {:?} -> {:?}", w[0], w[1]);
    }
    assert!(path.iter().all(|&c| map.is_free(c)));
}

/// Compares A* against BFS for every ordered pair of cells; returns the
/// number of solvable pairs checked.
fn compare_all_pairs(map: &GridMap) -> usize {
    let mut solvable = 0;
    let cells: Vec<Cell> = (0..map.width() * map.height()).map(|i| map.cell_at(i)).collect();
    for &a in &cells {
        for &b in &cells {
            let oracle = bfs_distance(map, a, b);
            let got = shortest_path(map, a, b);
            match (oracle, &got) {
                (Some(d), Some(p)) => {
                    assert_eq!(path_cost(p), d, "{a:?} -> {b:?} on\n{}", map.to_ascii());
                    assert_valid(map, p, a, b);
                    solvable += 1;
                }
                (None, None) => {}
                _ => panic!("reachability disagrees for {a:?} -> {b:?} on\n{}", map.to_ascii()),
            }
        }
    }
    solvable
}

#[test]
fn astar_matches_bfs_on_every_3x3_map() {
    let mut maps = 0;
    let mut pairs = 0;
    for mask in 0u32..(1 << 9) {
        let obstacles: Vec<bool> = (0..9).map(|i| mask & (1 << i) != 0).collect();
        let Ok(map) = GridMap::new(3, 3, obstacles) else {
            assert_eq!(mask, (1 << 9) - 1, "only the all-blocked map is invalid");
            continue;
        };
        maps += 1;
        pairs += compare_all_pairs(&map);
    }
    assert_eq!(maps, 511);
    assert!(pairs > 0);
}

#[test]
fn astar_matches_bfs_on_random_20x20_maps() {
    let mut r = rng(31);
    for seed in 0..100u64 {
        let density = [0.0, 0.1, 0.2, 0.3, 0.4][seed as usize % 5];
        // raw i.i.d. obstacles, so some pairs are unreachable
        let obstacles: Vec<bool> = (0..400).map(|_| r.random_bool(density)).collect();
        let raw = GridMap::new(20, 20, obstacles).unwrap();
        let repaired = gen_random(20, 20, density, seed).unwrap();
        for map in [&raw, &repaired] {
            let free = map.free_cells();
            for _ in 0..40 {
                let a = free[r.random_range(0..free.len())];
                let b = free[r.random_range(0..free.len())];
                let oracle = bfs_distance(map, a, b);
                let got = shortest_path(map, a, b);
                assert_eq!(got.as_ref().map(path_cost), oracle, "seed {seed} {a:?} -> {b:?}");
                if let Some(p) = got {
                    assert_valid(map, &p, a, b);
                }
            }
        }
    }
}

#[test]
fn distance_field_agrees_with_bfs() {
    for seed in 0..20 {
        let map = gen_random(15, 15, 0.3, seed).unwrap();
        let free = map.free_cells();
        let goal = free[seed as usize % free.len()];
        let field = DistanceField::compute(&map, goal);
        for &c in &free {
            assert_eq!(field.get(c).map(|d| d as usize), bfs_distance(&map, c, goal));
        }
    }
}

#[test]
fn paths_are_deterministic_including_ties() {
    let map = GridMap::open(9, 9);
    let a = Cell::new(0, 0);
    let b = Cell::new(8, 8);
    let first = shortest_path(&map, a, b).unwrap();
    for _ in 0..5 {
        assert_eq!(shortest_path(&map, a, b).unwrap(), first);
    }
    assert_eq!(path_cost(&first), 16);
}

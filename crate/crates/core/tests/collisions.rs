mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::rng;
use rand::Rng;
use srmt::gridenv::{resolve_collisions, targets_from_actions, Action, Cell, EnvConfig, EnvState, GridMap, Mode};
use srmt::maps::gen_random;

fn random_actions(r: &mut impl Rng, n: usize) -> Vec<Action> {
    (0..n).map(|_| Action::from_index(r.random_range(0..5)).unwrap()).collect()
}

fn check_conflict_free(map: &GridMap, before: &[Cell], after: &[Cell]) {
    let cells: HashSet<Cell> = after.iter().copied().collect();
    assert_eq!(cells.len(), after.len(), "vertex conflict: {before:?} -> {after:?}");
    for i in 0..before.len() {
        assert!(map.is_free(after[i]));
        assert!(before[i].manhattan(after[i]) <= 1);
        for j in 0..before.len() {
            if i != j && before[i] != after[i] {
                assert!(!(after[i] == before[j] && after[j] == before[i]), "edge conflict between {i} and {j}");
            }
        }
    }
}

#[test]
fn fuzzed_resolution_is_conflict_free_and_idempotent() {
    let mut r = rng(2024);
    let mut steps = 0;
    let mut seed = 0;
    while steps < 10_000 {
        seed += 1;
        let map = gen_random(r.random_range(4..12), r.random_range(4..12), 0.25, seed).unwrap();
        let n = r.random_range(2..=16).min(map.free_count());
        let free = map.free_cells();
        let mut positions: Vec<Cell> = rand::seq::index::sample(&mut r, free.len(), n).iter().map(|i| free[i]).collect();
        for _ in 0..50 {
            let actions = random_actions(&mut r, n);
            let targets = targets_from_actions(&positions, &actions);
            let out = resolve_collisions(&map, &positions, &targets);
            check_conflict_free(&map, &positions, &out);
            // resolving the resolved targets again changes nothing
            assert_eq!(resolve_collisions(&map, &positions, &out), out);
            // agents that move do go where they asked to
            for i in 0..n {
                assert!(out[i] == positions[i] || out[i] == targets[i]);
            }
            positions = out;
            steps += 1;
        }
    }
}

#[test]
fn fuzzed_environment_steps_keep_agents_apart() {
    let mut r = rng(99);
    let mut steps = 0;
    let mut seed = 0;
    while steps < 10_000 {
        seed += 1;
        let map = Arc::new(gen_random(12, 12, 0.2, seed).unwrap());
        let n = r.random_range(2..=16);
        let mode = if seed % 2 == 0 { Mode::Classical } else { Mode::Lifelong };
        let cfg = EnvConfig { mode, obs_size: 5, episode_length: 100 };
        let (mut env, _) = EnvState::reset_random(map.clone(), n, cfg, seed).unwrap();
        while !env.is_done() {
            let before: Vec<(usize, Cell)> =
                env.agents.iter().enumerate().filter(|(_, a)| a.active).map(|(i, a)| (i, a.position)).collect();
            let actions = random_actions(&mut r, before.len());
            let out = env.step(&actions).unwrap();
            let after: Vec<Cell> = before.iter().map(|&(i, _)| env.agents[i].position).collect();
            let old: Vec<Cell> = before.iter().map(|&(_, p)| p).collect();
            check_conflict_free(&map, &old, &after);
            let active: HashSet<Cell> = env.agents.iter().filter(|a| a.active).map(|a| a.position).collect();
            assert_eq!(active.len(), env.active_count());
            for o in out.observations.iter().flatten() {
                assert_eq!(o.data().len(), 3 * 25);
                assert!(o.data().iter().all(|v| (-1..=1).contains(v)));
            }
            steps += 1;
        }
    }
}

#[test]
fn same_seed_and_actions_give_identical_traces() {
    let run = || {
        let map = Arc::new(gen_random(10, 10, 0.2, 5).unwrap());
        let (mut env, _) = EnvState::reset_random(map, 6, EnvConfig::lifelong(), 77).unwrap();
        let mut r = rng(3);
        let mut trace = Vec::new();
        for _ in 0..60 {
            let actions = random_actions(&mut r, env.active_count());
            let out = env.step(&actions).unwrap();
            trace.push((out.records, env.agents.iter().map(|a| (a.position, a.goal)).collect::<Vec<_>>()));
        }
        trace
    };
    assert_eq!(run(), run());
}

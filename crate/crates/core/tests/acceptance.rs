//! One PASS/FAIL line per acceptance criterion.
//!
//! `cargo test --test acceptance -- --nocapture` prints the fast checks and
//! the smoke run. The desk-scale runs take tens of minutes each and are
//! ignored by default; run them with `--release -- --ignored --nocapture`.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use common::{bfs_distance, brute_gae, check_grad, random_observation, random_vec, rel_err, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use srmt::evalkit::{
    congestion, csr, isr, scalability, soc, sweep_corridors, throughput, EpisodeRecord, EvalOptions,
};
use srmt::gridenv::{resolve_collisions, targets_from_actions, Action, Cell, EnvConfig, EnvState, GridMap, Mode, TransitionRecord};
use srmt::maps::{gen_random, parse_movingai, serialize_movingai, MapError, MovingAIMap};
use srmt::numkit::{Graph, Tensor, Var, EMPTY_SLOT};
use srmt::pathing::{path_cost, shortest_path};
use srmt::policy::{AgentInput, CoreKind, HistoryBuffer, Policy, PolicyConfig, PolicyOutput, StepGraphInput};
use srmt::rewards::{compute_reward, RewardFn, RewardScheme};
use srmt::trainer::{collect_rollouts, compute_gae, train, IterationLog, PPOConfig, TaskSet, TrainState};

type Check = Result<String, String>;

/// Runs `f`, prints its verdict and returns whether it passed. Panics
/// inside a check count as failures.
fn criterion(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &out {
        Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
        Err(detail) => println!("FAIL  {name}: {detail} ({secs:.1}s)"),
    }
    out.is_ok()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- gradients ----

fn weighted(g: &mut Graph, shapes: &[Vec<usize>], x: &[f64], op: &dyn Fn(&mut Graph, &[Var]) -> Var) -> (Var, Vec<Var>) {
    let mut off = 0;
    let mut leaves = Vec::new();
    for s in shapes {
        let n: usize = s.iter().product();
        leaves.push(g.leaf(Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap()));
        off += n;
    }
    let y = op(g, &leaves);
    let shape = g.value(y).shape().to_vec();
    let w = random_vec(&mut rng(77), shape.iter().product(), 1.0);
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let yw = g.mul(y, w).unwrap();
    (g.sum(yw).unwrap(), leaves)
}

fn op_error(shapes: &[Vec<usize>], seed: u64, op: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut r = rng(seed);
    // keep clear of the relu/clamp/min kinks
    let x: Vec<f64> = (0..n)
        .map(|i| loop {
            let v: f64 = r.random_range(-1.5..1.5);
            if [0.0, 0.8, -0.8].iter().all(|k| (v - k).abs() > 0.05) {
                break v + 1e-3 * i as f64;
            }
        })
        .collect();
    let mut g = Graph::new();
    let (loss, leaves) = weighted(&mut g, shapes, &x, op);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves.iter().flat_map(|&v| grads.get(v).into_data()).collect();
    let mut f = |xs: &[f64]| {
        let mut g = Graph::new();
        let (l, _) = weighted(&mut g, shapes, xs, op);
        g.value(l).item()
    };
    check_grad(&mut f, &x, &analytic)
}

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    let v = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("add", v(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
        ("sub", v(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.sub(x[0], x[1]).unwrap())),
        ("mul", v(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.mul(x[0], x[1]).unwrap())),
        ("minimum", v(&[&[3, 4], &[3, 4]]), Box::new(|g, x| {
            let shifted = g.add_scalar(x[1], 0.3).unwrap();
            g.minimum(x[0], shifted).unwrap()
        })),
        ("scale", v(&[&[2, 5]]), Box::new(|g, x| g.scale(x[0], -1.7).unwrap())),
        ("add_scalar", v(&[&[2, 5]]), Box::new(|g, x| g.add_scalar(x[0], 0.3).unwrap())),
        ("exp", v(&[&[2, 5]]), Box::new(|g, x| g.exp(x[0]).unwrap())),
        ("tanh", v(&[&[2, 5]]), Box::new(|g, x| g.tanh(x[0]).unwrap())),
        ("sigmoid", v(&[&[2, 5]]), Box::new(|g, x| g.sigmoid(x[0]).unwrap())),
        ("relu", v(&[&[2, 5]]), Box::new(|g, x| g.relu(x[0]).unwrap())),
        ("clamp", v(&[&[2, 5]]), Box::new(|g, x| g.clamp(x[0], -0.8, 0.8).unwrap())),
        ("sum", v(&[&[2, 3, 2]]), Box::new(|g, x| g.sum(x[0]).unwrap())),
        ("mean", v(&[&[2, 3, 2]]), Box::new(|g, x| g.mean(x[0]).unwrap())),
        ("sum_last", v(&[&[2, 3, 2]]), Box::new(|g, x| g.sum_last(x[0]).unwrap())),
        ("matmul", v(&[&[2, 3, 4], &[4, 5]]), Box::new(|g, x| g.matmul(x[0], x[1]).unwrap())),
        ("add_row", v(&[&[3, 5], &[5]]), Box::new(|g, x| g.add_row(x[0], x[1]).unwrap())),
        ("conv2d", v(&[&[2, 3, 5, 5], &[2, 3, 3, 3]]), Box::new(|g, x| g.conv2d(x[0], x[1]).unwrap())),
        ("layer_norm", v(&[&[3, 4], &[4], &[4]]), Box::new(|g, x| g.layer_norm(x[0], x[1], x[2]).unwrap())),
        ("softmax", v(&[&[3, 4]]), Box::new(|g, x| g.softmax(x[0]).unwrap())),
        ("log_softmax", v(&[&[3, 4]]), Box::new(|g, x| g.log_softmax(x[0]).unwrap())),
        ("gather_last", v(&[&[3, 5]]), Box::new(|g, x| g.gather_last(x[0], &[1, 4, 2]).unwrap())),
        ("reshape", v(&[&[4, 3]]), Box::new(|g, x| g.reshape(x[0], &[2, 6]).unwrap())),
        ("slice_rows", v(&[&[4, 3]]), Box::new(|g, x| g.slice_rows(x[0], 1, 3).unwrap())),
        ("select_rows", v(&[&[4, 3]]), Box::new(|g, x| g.select_rows(x[0], &[2, 0, 2, 3]).unwrap())),
        ("concat_rows", v(&[&[2, 3], &[1, 3]]), Box::new(|g, x| g.concat_rows(&[x[0], x[1]]).unwrap())),
        ("stack_rows", v(&[&[2, 3], &[2, 3]]), Box::new(|g, x| {
            g.stack_rows(&[x[0], x[1]], vec![0, EMPTY_SLOT, 1, 0, 1, 1, EMPTY_SLOT, 0], 4).unwrap()
        })),
        ("attention", v(&[&[2, 3, 6], &[2, 4, 6], &[2, 4, 6]]), Box::new(|g, x| {
            let mask: Vec<bool> = (0..8).map(|i| i % 4 != 1).collect();
            g.attention(x[0], x[1], x[2], &mask, 2).unwrap()
        })),
    ]
}

/// Two SRMT agents unrolled for three steps with memory flowing through the pool.
fn unrolled_loss(p: &Policy, g: &mut Graph, obs: &Tensor, coef: &[f64]) -> Var {
    let hlen = p.config().history;
    let d = p.config().hidden;
    let x = g.constant(obs.clone());
    let emb = p.encode_graph(g, x).unwrap();
    let first = g.slice_rows(emb, 0, 2).unwrap();
    let mut memory = p.init_memory_graph(g, first).unwrap();
    let mut total = None;
    for t in 0..3 {
        let current = [2 * t, 2 * t + 1];
        let mut history = vec![EMPTY_SLOT; 2 * hlen];
        for a in 0..2 {
            for s in 0..t {
                history[a * hlen + hlen - t + s] = (2 * s + a) as u32;
            }
        }
        let pool_table = g.reshape(memory, &[2, d]).unwrap();
        let others = vec![vec![1], vec![0]];
        let out = p
            .step_graph(g, &StepGraphInput { emb, current: &current, history: &history, memory, pool_table: Some(pool_table), others: &others })
            .unwrap();
        let c = g.constant(Tensor::new(vec![2, 5], coef[t * 10..t * 10 + 10].to_vec()).unwrap());
        let l = g.mul(out.logits, c).unwrap();
        let l = g.sum(l).unwrap();
        let v = g.sum(out.value).unwrap();
        let step = g.add(l, v).unwrap();
        total = Some(match total {
            Some(acc) => g.add(acc, step).unwrap(),
            None => step,
        });
        memory = out.next_memory;
    }
    let cm = g.constant(Tensor::new(vec![2, d], coef[30..30 + 2 * d].to_vec()).unwrap());
    let m = g.mul(memory, cm).unwrap();
    let m = g.sum(m).unwrap();
    g.add(total.unwrap(), m).unwrap()
}

fn end_to_end_error() -> f64 {
    let mut cfg = PolicyConfig::mapf(CoreKind::Srmt);
    cfg.init_seed = 12;
    let mut p = Policy::new(cfg).unwrap();
    let mut r = rng(21);
    let obs: Vec<f64> = (0..6).flat_map(|_| random_observation(&mut r, 5).to_f64()).collect();
    let obs = Tensor::new(vec![6, 3, 5, 5], obs).unwrap();
    let coef = random_vec(&mut r, 30 + 2 * p.config().hidden, 1.0);
    let aw = p.params().id_of("action.w").unwrap();
    let noise = random_vec(&mut r, p.params().get(aw).len(), 0.5);
    p.params_mut().get_mut(aw).data_mut().copy_from_slice(&noise);

    let mut g = Graph::new();
    let loss = unrolled_loss(&p, &mut g, &obs, &coef);
    let grads = g.backward(loss).unwrap().params(p.params());
    let mut worst = 0.0f64;
    for ti in 0..p.params().len() {
        let len = p.params().tensors()[ti].len();
        for _ in 0..len.min(3) {
            let j = r.random_range(0..len);
            let orig = p.params().tensors()[ti].data()[j];
            let mut eval = |v: f64| {
                p.params_mut().tensors_mut()[ti].data_mut()[j] = v;
                let mut g = Graph::new();
                let l = unrolled_loss(&p, &mut g, &obs, &coef);
                g.value(l).item()
            };
            let fd = (eval(orig + 1e-5) - eval(orig - 1e-5)) / 2e-5;
            p.params_mut().tensors_mut()[ti].data_mut()[j] = orig;
            worst = worst.max(rel_err(grads[ti].data()[j], fd));
        }
    }
    worst
}

fn gradients() -> Check {
    let mut worst = (0.0, "");
    for (i, (name, shapes, op)) in op_table().iter().enumerate() {
        let err = op_error(shapes, 100 + i as u64, op.as_ref());
        ensure(err < 1e-4, || format!("{name}: relative error {err:.2e}"))?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let e2e = end_to_end_error();
    ensure(e2e < 1e-3, || format!("end-to-end relative error {e2e:.2e}"))?;
    Ok(format!("{} ops, worst {:.1e} ({}), end-to-end {e2e:.1e}", op_table().len(), worst.0, worst.1))
}

// ---- pathfinding ----

fn mismatches(map: &GridMap) -> (usize, usize) {
    let cells: Vec<Cell> = (0..map.width() * map.height()).map(|i| map.cell_at(i)).collect();
    let (mut bad, mut pairs) = (0, 0);
    for &a in &cells {
        for &b in &cells {
            pairs += 1;
            if bfs_distance(map, a, b) != shortest_path(map, a, b).map(|p| path_cost(&p)) {
                bad += 1;
            }
        }
    }
    (bad, pairs)
}

fn pathfinding() -> Check {
    let (mut bad, mut pairs) = (0, 0);
    for mask in 0u32..(1 << 9) - 1 {
        let map = GridMap::new(3, 3, (0..9).map(|i| mask & (1 << i) != 0).collect()).unwrap();
        let (b, p) = mismatches(&map);
        bad += b;
        pairs += p;
    }
    let mut r = rng(31);
    for seed in 0..100 {
        let map = gen_random(20, 20, 0.3, seed).unwrap();
        for _ in 0..40 {
            let a = map.cell_at(r.random_range(0..400));
            let b = map.cell_at(r.random_range(0..400));
            pairs += 1;
            if bfs_distance(&map, a, b) != shortest_path(&map, a, b).map(|p| path_cost(&p)) {
                bad += 1;
            }
        }
    }
    ensure(bad == 0, || format!("{bad} mismatches in {pairs} pairs"))?;
    Ok(format!("511 3x3 maps all-pairs and 100 20x20 maps, {pairs} pairs, 0 mismatches"))
}

// ---- collisions ----

fn conflicts(before: &[Cell], after: &[Cell]) -> usize {
    let vertex = after.len() - after.iter().collect::<HashSet<_>>().len();
    let mut edge = 0;
    for i in 0..before.len() {
        for j in i + 1..before.len() {
            if before[i] != after[i] && after[i] == before[j] && after[j] == before[i] {
                edge += 1;
            }
        }
    }
    vertex + edge
}

fn collisions() -> Check {
    let mut r = rng(2024);
    let (mut steps, mut bad, mut not_idempotent) = (0, 0, 0);
    let mut seed = 0;
    while steps < 10_000 {
        seed += 1;
        let map = Arc::new(gen_random(12, 12, 0.2, seed).unwrap());
        let n = r.random_range(2..=16);
        let mode = if seed % 2 == 0 { Mode::Classical } else { Mode::Lifelong };
        let cfg = EnvConfig { mode, obs_size: 5, episode_length: 100 };
        let (mut env, _) = EnvState::reset_random(map.clone(), n, cfg, seed).unwrap();
        while !env.is_done() {
            let live: Vec<usize> = (0..n).filter(|&i| env.agents[i].active).collect();
            let before: Vec<Cell> = live.iter().map(|&i| env.agents[i].position).collect();
            let actions: Vec<Action> = live.iter().map(|_| Action::from_index(r.random_range(0..5)).unwrap()).collect();
            let out = resolve_collisions(&map, &before, &targets_from_actions(&before, &actions));
            if resolve_collisions(&map, &before, &out) != out {
                not_idempotent += 1;
            }
            bad += conflicts(&before, &out);
            env.step(&actions).unwrap();
            let after: Vec<Cell> = live.iter().map(|&i| env.agents[i].position).collect();
            bad += conflicts(&before, &after);
            steps += 1;
        }
    }
    ensure(bad == 0 && not_idempotent == 0, || format!("{bad} conflicts, {not_idempotent} non-idempotent resolutions"))?;
    Ok(format!("{steps} steps with 2-16 agents, 0 conflicts, idempotent"))
}

// ---- rewards ----

#[derive(Clone, Copy, Debug)]
enum Outcome {
    Arrived,
    Towards,
    Away,
    Sideways,
    Hold,
}

fn transition(o: Outcome, followed: bool) -> TransitionRecord {
    let goal = Cell::new(2, 5);
    let (from, to, action, d0, d1) = match o {
        Outcome::Arrived => (Cell::new(2, 4), goal, Action::Right, 1, 0),
        Outcome::Towards => (Cell::new(2, 2), Cell::new(2, 3), Action::Right, 3, 2),
        Outcome::Away => (Cell::new(2, 2), Cell::new(2, 1), Action::Left, 3, 4),
        Outcome::Sideways => (Cell::new(1, 4), Cell::new(0, 4), Action::Up, 2, 3),
        Outcome::Hold => (Cell::new(2, 2), Cell::new(2, 2), Action::Stay, 3, 3),
    };
    TransitionRecord {
        agent: 0,
        action,
        old_position: from,
        new_position: to,
        goal,
        planned_next: Some(if followed { to } else { Cell::new(9, 9) }),
        followed_path: followed,
        arrived: matches!(o, Outcome::Arrived),
        old_distance: Some(d0),
        new_distance: Some(d1),
        unreachable: false,
    }
}

fn table(scheme: RewardScheme, o: Outcome, followed: bool) -> f64 {
    use Outcome::*;
    use RewardScheme::*;
    match (scheme, o) {
        (LifelongFollow, _) => if followed { 0.01 } else { 0.0 },
        (_, Arrived) => 1.0,
        (Directional, Towards) => 0.005,
        (Directional | Sparse, _) => 0.0,
        (Dense, _) => -0.01,
        (DirectionalNegative, Towards) => -0.005,
        (DirectionalNegative, _) => -0.01,
        (MovingNegative, Hold) => -0.005,
        (MovingNegative, _) => -0.01,
    }
}

fn rewards() -> Check {
    let mut cells = 0;
    for scheme in RewardScheme::ALL {
        for o in [Outcome::Arrived, Outcome::Towards, Outcome::Away, Outcome::Sideways, Outcome::Hold] {
            for followed in [false, true] {
                let got = compute_reward(scheme, &transition(o, followed));
                let want = table(scheme, o, followed);
                ensure(got == want, || format!("{scheme} {o:?} followed={followed}: {got} != {want}"))?;
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} scheme x outcome cells exact"))
}

// ---- GAE ----

fn gae() -> Check {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 50;
        let rw: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| r.random_bool(0.1)).collect();
        let boot = r.random_range(-1.0..1.0);
        let gamma = r.random_range(0.5..1.0);
        let lambda = if case % 10 == 0 { 0.0 } else { r.random_range(0.0..1.0) };
        let (adv, _) = compute_gae(&rw, &v, &d, boot, gamma, lambda).unwrap();
        let oracle = brute_gae(&rw, &v, &d, boot, gamma, lambda);
        worst = adv.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 sequences of 50 steps, max deviation {worst:.1e}"))
}

// ---- pool invariance ----

fn bits(o: &PolicyOutput) -> Vec<u64> {
    o.logits.iter().chain(&o.next_memory).chain([&o.value]).map(|x| x.to_bits()).collect()
}

fn pool_invariance() -> Check {
    for net in 0..20u64 {
        let mut cfg = PolicyConfig::mapf(CoreKind::Srmt);
        cfg.init_seed = net;
        let p = Policy::new(cfg).unwrap();
        let mut r = rng(100 + net);
        let n = r.random_range(2..=8);
        let d = p.config().hidden;
        let agents: Vec<(Vec<f64>, HistoryBuffer, Vec<f64>)> = (0..n)
            .map(|_| {
                let mut h = HistoryBuffer::new(p.config().history);
                for _ in 0..r.random_range(0..=10) {
                    h.push(random_vec(&mut r, d, 1.0));
                }
                (random_vec(&mut r, p.memory_width(), 0.9), h, random_vec(&mut r, d, 1.0))
            })
            .collect();
        let ins: Vec<AgentInput> = agents.iter().map(|(m, h, c)| AgentInput { memory: m, history: h, current: c }).collect();
        let (out, _) = p.joint_step(&ins).unwrap();
        let pool: Vec<Vec<f64>> = agents.iter().map(|a| a.0.clone()).collect();
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut r);
            let permuted: Vec<Vec<f64>> = order.iter().map(|&j| pool[j].clone()).collect();
            let own = order.iter().position(|&j| j == i).unwrap();
            let single = p.srmt_forward(&ins[i], &permuted, own).unwrap();
            ensure(bits(&single) == bits(&out[i]), || format!("network {net}: pool order changed agent {i}"))?;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let shuffled: Vec<AgentInput> = perm.iter().map(|&j| ins[j]).collect();
        let (out2, _) = p.joint_step(&shuffled).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            ensure(bits(&out2[k]) == bits(&out[j]), || format!("network {net}: evaluation order changed agent {j}"))?;
        }
    }
    Ok("20 networks, 2-8 agents, bitwise equal".into())
}

// ---- metrics ----

fn rec(mode: Mode, arrivals: Vec<Option<usize>>, episode_length: usize) -> EpisodeRecord {
    let n = arrivals.len();
    EpisodeRecord {
        map: "t".into(),
        mode,
        agents: n,
        obs_size: 5,
        episode_length,
        steps: 0,
        arrivals,
        positions: vec![(0..n).map(|i| Cell::new(0, i)).collect()],
        active: vec![vec![true; n]],
        memory: None,
        goals_reached: 0,
        runtime_secs: 0.0,
    }
}

fn metrics() -> Check {
    let c = Mode::Classical;
    let checks: Vec<(&str, f64, f64)> = vec![
        ("csr all", csr(&rec(c, vec![Some(3), Some(9)], 512)).unwrap(), 1.0),
        ("csr one missing", csr(&rec(c, vec![Some(3), None], 512)).unwrap(), 0.0),
        ("isr half", isr(&rec(c, vec![None, Some(9)], 512)).unwrap(), 0.5),
        ("isr 3/4", isr(&rec(c, vec![Some(1), None, Some(2), Some(3)], 512)).unwrap(), 0.75),
        ("soc 10+14", soc(&rec(c, vec![Some(10), Some(14)], 512)).unwrap() as f64, 24.0),
        ("soc none", soc(&rec(c, vec![None, None], 512)).unwrap() as f64, 1024.0),
        ("throughput", {
            let mut t = rec(Mode::Lifelong, vec![None; 4], 512);
            t.goals_reached = 128;
            throughput(&t).unwrap()
        }, 0.25),
        ("congestion alone", {
            let mut w = rec(c, vec![None], 1);
            w.positions = vec![vec![Cell::new(5, 5)], vec![Cell::new(5, 6)]];
            w.active = vec![vec![true]; 2];
            w.steps = 1;
            congestion(&GridMap::open(20, 20), &[w]).unwrap()
        }, 0.0),
        ("congestion 2x2 pair", {
            let mut w = rec(c, vec![None, None], 1);
            w.positions = vec![vec![Cell::new(0, 0), Cell::new(0, 1)]; 2];
            w.active = vec![vec![true; 2]; 2];
            w.steps = 1;
            congestion(&GridMap::open(2, 2), &[w]).unwrap()
        }, 1.0),
        ("scalability linear", scalability(&[(2, 1.0), (4, 2.0), (8, 4.0)]).unwrap(), 1.0),
        ("scalability flat", scalability(&[(2, 1.0), (4, 1.0)]).unwrap(), 2.0),
        ("scalability quadratic", scalability(&[(4, 4.0), (2, 1.0)]).unwrap(), 0.5),
    ];
    for (name, got, want) in &checks {
        ensure((got - want).abs() < 1e-12, || format!("{name}: {got} != {want}"))?;
    }
    Ok(format!("{} hand-computed examples", checks.len()))
}

// ---- determinism ----

fn corridors(lengths: &[usize], episode_length: usize) -> TaskSet {
    TaskSet::bottleneck(lengths, 5, EnvConfig { mode: Mode::Classical, obs_size: 5, episode_length }).unwrap()
}

fn determinism() -> Check {
    let tasks = corridors(&[3, 5], 30);
    let cfg = PPOConfig { batch_size: 128, minibatch_size: 128, workers: 1, envs_per_worker: 4, kl_sample: 128, total_steps: 3 * 128, ..PPOConfig::mapf() };
    let reward = RewardFn::new(RewardScheme::Directional);
    let run = || {
        let mut pc = PolicyConfig::mapf(CoreKind::Srmt);
        pc.init_seed = 7;
        let policy = Policy::new(pc).unwrap();
        let mut batches = vec![collect_rollouts(&policy, &tasks, &reward, &cfg, 42, 0, 1).unwrap().transitions];
        let state = TrainState::new(policy, cfg.lr);
        // the hook sees the state that iteration `s.iteration` will start from
        let out = train(state, &tasks, &reward, &cfg, 42, 1, |s, _| {
            if s.iteration < 3 {
                batches.push(collect_rollouts(&s.policy, &tasks, &reward, &cfg, 42, s.iteration, 1).unwrap().transitions);
            }
            Ok(true)
        })
        .unwrap();
        let seeds: Vec<u64> = (0..5).collect();
        let (reports, _) = sweep_corridors(&out.state.policy, &[3, 6], &seeds, 2, 5, &EvalOptions::default()).unwrap();
        (batches, reports)
    };
    let (ba, ra) = run();
    let (bb, rb) = run();
    ensure(ba.len() == 3, || format!("{} iterations", ba.len()))?;
    ensure(ba == bb, || "training batches differ".into())?;
    ensure(ra == rb, || "evaluation reports differ".into())?;
    Ok(format!("3 iterations of batches and {} eval reports identical", ra.len()))
}

// ---- MovingAI ----

fn movingai() -> Check {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..25), r.random_range(1..25));
        let rows = (0..h).map(|_| (0..w).map(|_| ['.', 'G', '@', 'O', 'T'][r.random_range(0..5)]).collect()).collect();
        let m = MovingAIMap { map_type: "octile".into(), height: h, width: w, rows };
        let text = serialize_movingai(&m);
        ensure(parse_movingai(&text).as_ref() == Ok(&m), || format!("round trip failed for seed {seed}"))?;
    }
    let fixtures = [
        ("type octile\nheight 3\nwidth 2\nmap\n..\n..\n", 7, 1),
        ("type octile\nheight 2\nwidth 3\nmap\n...\n.x.\n", 6, 2),
        ("type octile\nheight 2\nwidth 4\nmap\n....\n..\n", 6, 3),
        ("type octile\nheight 2\nwidth two\nmap\n..\n..\n", 3, 7),
        ("type octile\nheight 1\nwidth 2\n..\n", 4, 1),
    ];
    for (text, line, column) in fixtures {
        match parse_movingai(text) {
            Err(MapError::Parse { line: l, column: c, .. }) if (l, c) == (line, column) => {}
            other => return Err(format!("expected error at {line}:{column}, got {other:?}")),
        }
    }
    Ok("20 round trips, 5 malformed fixtures located".into())
}

// ---- training ----

/// Desk-scale settings: the paper's PPO constants with a smaller batch and a
/// tighter learning-rate ceiling.
fn desk_ppo(total_steps: u64) -> PPOConfig {
    PPOConfig { batch_size: 4096, minibatch_size: 1024, lr_max: 2e-3, total_steps, ..PPOConfig::mapf() }
}

struct Run {
    policy: Policy,
    logs: Vec<IterationLog>,
    env_steps: usize,
}

/// Trains `core` on corridors with 2 agents, stopping at `env_budget`
/// environment steps.
fn desk_run(core: CoreKind, scheme: RewardScheme, lengths: &[usize], env_budget: usize, seed: u64) -> Run {
    let mut pc = PolicyConfig::mapf(core);
    pc.init_seed = seed;
    let cfg = desk_ppo(u64::MAX);
    let tasks = corridors(lengths, 128);
    let mut env_steps = 0;
    let state = TrainState::new(Policy::new(pc).unwrap(), cfg.lr);
    let out = train(state, &tasks, &RewardFn::new(scheme), &cfg, seed, 1, |_, log| {
        env_steps += log.env_steps;
        Ok(env_steps + log.env_steps <= env_budget)
    })
    .unwrap();
    Run { policy: out.state.policy, logs: out.logs, env_steps }
}

fn mean_csr(policy: &Policy, lengths: &[usize]) -> f64 {
    let seeds: Vec<u64> = (0..5).collect();
    let (reports, _) = sweep_corridors(policy, lengths, &seeds, 2, 5, &EvalOptions::default()).unwrap();
    let csr: Vec<f64> = reports.iter().filter(|r| r.metric == "csr").map(|r| r.value).collect();
    csr.iter().sum::<f64>() / csr.len() as f64
}

fn mean_reward(logs: &[IterationLog]) -> f64 {
    let v: Vec<f64> = logs.iter().filter_map(|l| l.mean_reward).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn smoke() -> Check {
    let lengths: Vec<usize> = (3..=6).collect();
    let run = desk_run(CoreKind::Srmt, RewardScheme::Directional, &lengths, 200_000, 1);
    let k = (run.logs.len() / 10).max(1);
    let first = mean_reward(&run.logs[..k]);
    let last = mean_reward(&run.logs[run.logs.len() - k..]);
    ensure(last > first, || format!("mean episode reward {first:.3} -> {last:.3}, no improvement"))?;
    Ok(format!("{} iterations, {} env steps, mean episode reward {first:.3} -> {last:.3}", run.logs.len(), run.env_steps))
}

const DESK_BUDGET: usize = 5_000_000;
/// Environment steps actually used per seed, well inside the budget.
const DESK_STEPS: usize = 500_000;
const DESK_SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn acceptance_criteria() {
    let results = [
        criterion("gradient correctness", gradients),
        criterion("pathfinding exactness", pathfinding),
        criterion("collision safety", collisions),
        criterion("reward table", rewards),
        criterion("GAE oracle", gae),
        criterion("pool-permutation and evaluation-order invariance", pool_invariance),
        criterion("metric examples", metrics),
        criterion("determinism", determinism),
        criterion("MovingAI parser", movingai),
        criterion("training smoke run (corridors 3-6, 2e5 steps)", smoke),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} criteria failed");
}

#[test]
#[ignore]
fn desk_scale_directional() {
    let ok = criterion("desk-scale Directional (SRMT, corridors 3-10, 3 seeds)", || {
        let train_lengths: Vec<usize> = (3..=10).collect();
        let held_out: Vec<usize> = (11..=30).collect();
        let (mut tr, mut ho, mut steps) = (0.0, 0.0, 0);
        for seed in DESK_SEEDS {
            let run = desk_run(CoreKind::Srmt, RewardScheme::Directional, &train_lengths, DESK_STEPS, seed);
            let (a, b) = (mean_csr(&run.policy, &train_lengths), mean_csr(&run.policy, &held_out));
            println!("  seed {seed}: {} env steps, CSR train {a:.3}, held-out {b:.3}", run.env_steps);
            tr += a / 3.0;
            ho += b / 3.0;
            steps = steps.max(run.env_steps);
        }
        ensure(steps <= DESK_BUDGET, || format!("{steps} env steps over budget"))?;
        ensure(tr >= 0.9 && ho >= 0.8, || format!("CSR train {tr:.3}, held-out {ho:.3}"))?;
        Ok(format!("CSR train {tr:.3}, held-out {ho:.3}, at most {steps} env steps per seed"))
    });
    assert!(ok);
}

#[test]
#[ignore]
fn desk_scale_sparse_ordering() {
    let ok = criterion("Sparse relative trend (SRMT >= Attention, 3 seeds)", || {
        let train_lengths: Vec<usize> = (3..=10).collect();
        let all: Vec<usize> = (3..=30).collect();
        let mean = |core| {
            let mut total = 0.0;
            for seed in DESK_SEEDS {
                let run = desk_run(core, RewardScheme::Sparse, &train_lengths, DESK_STEPS, seed);
                let c = mean_csr(&run.policy, &all);
                println!("  {core:?} seed {seed}: {} env steps, CSR {c:.3}", run.env_steps);
                total += c / 3.0;
            }
            total
        };
        let (s, a) = (mean(CoreKind::Srmt), mean(CoreKind::Attention));
        ensure(s >= a, || format!("SRMT {s:.3} < Attention {a:.3}"))?;
        Ok(format!("SRMT {s:.3}, Attention {a:.3}"))
    });
    assert!(ok);
}

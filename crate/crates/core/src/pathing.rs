//! Single-agent shortest paths on the 4-connected grid.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use crate::gridenv::{Cell, GridMap};

/// Cells from the current position to the goal, both inclusive.
pub type Path = Vec<Cell>;

#[derive(Debug, PartialEq, Eq)]
struct Frontier {
    f: usize,
    g: usize,
    seq: usize,
    idx: usize,
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: smallest f first, then largest g, then earliest insertion.
        Reverse(self.f)
            .cmp(&Reverse(other.f))
            .then(self.g.cmp(&other.g))
            .then(Reverse(self.seq).cmp(&Reverse(other.seq)))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* with the Manhattan heuristic. `None` when `to` is unreachable or either
/// endpoint is blocked.
pub fn shortest_path(map: &GridMap, from: Cell, to: Cell) -> Option<Path> {
    if !map.is_free(from) || !map.is_free(to) {
        return None;
    }
    let n = map.width() * map.height();
    let mut g_score = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let start = map.index(from);
    let goal = map.index(to);
    g_score[start] = 0;
    let mut seq = 0;
    heap.push(Frontier { f: from.manhattan(to), g: 0, seq, idx: start });
    while let Some(Frontier { g, idx, .. }) = heap.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        if idx == goal {
            let mut path = vec![map.cell_at(idx)];
            let mut cur = idx;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                path.push(map.cell_at(cur));
            }
            path.reverse();
            return Some(path);
        }
        let cell = map.cell_at(idx);
        for nb in map.neighbors(cell) {
            let ni = map.index(nb);
            let ng = g + 1;
            if !closed[ni] && ng < g_score[ni] {
                g_score[ni] = ng;
                parent[ni] = idx;
                seq += 1;
                heap.push(Frontier { f: ng + nb.manhattan(to), g: ng, seq, idx: ni });
            }
        }
    }
    None
}

/// Number of moves along a path.
pub fn path_cost(path: &Path) -> usize {
    path.len().saturating_sub(1)
}

/// Exact graph distance from every cell to one goal.
#[derive(Debug, Clone)]
pub struct DistanceField {
    goal: Cell,
    width: usize,
    dist: Vec<u32>,
}

pub const UNREACHABLE: u32 = u32::MAX;

impl DistanceField {
    pub fn compute(map: &GridMap, goal: Cell) -> Self {
        let mut dist = vec![UNREACHABLE; map.width() * map.height()];
        if map.is_free(goal) {
            let mut queue = VecDeque::new();
            dist[map.index(goal)] = 0;
            queue.push_back(goal);
            while let Some(c) = queue.pop_front() {
                let d = dist[map.index(c)];
                for nb in map.neighbors(c) {
                    let ni = map.index(nb);
                    if dist[ni] == UNREACHABLE {
                        dist[ni] = d + 1;
                        queue.push_back(nb);
                    }
                }
            }
        }
        Self { goal, width: map.width(), dist }
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    /// Distance in moves, `None` if unreachable.
    pub fn get(&self, c: Cell) -> Option<u32> {
        if c.col >= self.width {
            return None;
        }
        self.dist.get(c.row * self.width + c.col).copied().filter(|&d| d != UNREACHABLE)
    }
}

/// Distance fields keyed by goal, for one fixed map.
#[derive(Debug, Default, Clone)]
pub struct DistanceCache {
    fields: HashMap<Cell, Arc<DistanceField>>,
}

impl DistanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, map: &GridMap, goal: Cell) -> Arc<DistanceField> {
        self.fields.entry(goal).or_insert_with(|| Arc::new(DistanceField::compute(map, goal))).clone()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// What [`replan_if_needed`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replan {
    /// Position unchanged and still at the head of the path.
    Kept,
    /// Moved one step along the path; the consumed prefix was dropped.
    Advanced,
    /// A fresh search was run.
    Replanned,
    /// The goal cannot be reached; the path is now empty.
    Unreachable,
}

/// Keeps `path` coherent with the agent's `position` and `goal`.
pub fn replan_if_needed(path: &mut Path, position: Cell, goal: Cell, map: &GridMap) -> Replan {
    if path.last() == Some(&goal) {
        if path.first() == Some(&position) {
            return Replan::Kept;
        }
        if path.get(1) == Some(&position) {
            path.remove(0);
            return Replan::Advanced;
        }
    }
    match shortest_path(map, position, goal) {
        Some(p) => {
            *path = p;
            Replan::Replanned
        }
        None => {
            path.clear();
            Replan::Unreachable
        }
    }
}

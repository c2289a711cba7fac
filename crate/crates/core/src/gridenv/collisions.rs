use std::collections::HashMap;

use super::{Action, Cell, GridMap};

/// Intended target cell for each agent; moves that leave the grid become Stay.
pub fn targets_from_actions(positions: &[Cell], actions: &[Action]) -> Vec<Cell> {
    positions
        .iter()
        .zip(actions)
        .map(|(&p, &a)| {
            let (dr, dc) = a.delta();
            p.offset(dr, dc).unwrap_or(p)
        })
        .collect()
}

/// Applies the hold rules until nothing changes:
///
/// * a move into an obstacle, off the map, or farther than one cell is a hold;
/// * every agent targeting a cell claimed by two or more agents holds;
/// * two agents swapping cells both hold;
/// * a move into the cell of an agent that holds is a hold.
///
/// Every rule only turns moves into holds, so at most `n` rounds run and the
/// result has no vertex or edge conflict.
pub fn resolve_collisions(map: &GridMap, positions: &[Cell], targets: &[Cell]) -> Vec<Cell> {
    assert_eq!(positions.len(), targets.len(), "one target per agent");
    let n = positions.len();
    let mut out: Vec<Cell> = positions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| if map.is_free(t) && p.manhattan(t) <= 1 { t } else { p })
        .collect();
    let occupant: HashMap<Cell, usize> = positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut claims: HashMap<Cell, usize> = HashMap::with_capacity(n);
    loop {
        let mut changed = false;

        claims.clear();
        for &t in &out {
            *claims.entry(t).or_insert(0) += 1;
        }
        for i in 0..n {
            if out[i] != positions[i] && claims[&out[i]] >= 2 {
                out[i] = positions[i];
                changed = true;
            }
        }

        for i in 0..n {
            if out[i] == positions[i] {
                continue;
            }
            if let Some(&j) = occupant.get(&out[i]) {
                let swap = out[j] == positions[i];
                let holds = out[j] == positions[j];
                if swap || holds {
                    out[i] = positions[i];
                    if swap {
                        out[j] = positions[j];
                    }
                    changed = true;
                }
            }
        }

        if !changed {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(r: usize, col: usize) -> Cell {
        Cell::new(r, col)
    }

    #[test]
    fn no_conflict_is_identity() {
        let m = GridMap::open(5, 5);
        let pos = [c(0, 0), c(2, 2)];
        let tgt = [c(0, 1), c(3, 2)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), tgt.to_vec());
    }

    #[test]
    fn three_way_vertex_conflict() {
        let m = GridMap::open(3, 3);
        let pos = [c(0, 1), c(1, 0), c(1, 2)];
        let tgt = [c(1, 1), c(1, 1), c(1, 1)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), pos.to_vec());
    }

    #[test]
    fn swap_holds_both() {
        let m = GridMap::open(2, 1);
        let pos = [c(0, 0), c(0, 1)];
        let tgt = [c(0, 1), c(0, 0)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), pos.to_vec());
    }

    #[test]
    fn cascade_through_blocked_mover() {
        // A moves into B's cell; B tries to walk into a wall, so B holds and A holds.
        let m = GridMap::from_ascii(&["..@"]).unwrap();
        let pos = [c(0, 0), c(0, 1)];
        let tgt = [c(0, 1), c(0, 2)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), pos.to_vec());
    }

    #[test]
    fn following_a_mover_is_allowed() {
        let m = GridMap::open(3, 1);
        let pos = [c(0, 0), c(0, 1)];
        let tgt = [c(0, 1), c(0, 2)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), tgt.to_vec());
    }

    #[test]
    fn rotation_cycle_is_allowed() {
        let m = GridMap::open(2, 2);
        let pos = [c(0, 0), c(0, 1), c(1, 1), c(1, 0)];
        let tgt = [c(0, 1), c(1, 1), c(1, 0), c(0, 0)];
        assert_eq!(resolve_collisions(&m, &pos, &tgt), tgt.to_vec());
    }

    #[test]
    fn out_of_grid_is_stay() {
        let pos = [c(0, 0)];
        assert_eq!(targets_from_actions(&pos, &[Action::Up]), pos.to_vec());
    }
}

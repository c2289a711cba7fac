use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{EpisodeRecord, EvalError};

/// One agent pair at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub agent_a: usize,
    pub agent_b: usize,
    /// Missing when either memory vector has zero norm.
    pub cosine_distance: Option<f64>,
    pub euclidean_distance: f64,
    /// First step the pair sees each other while closing in.
    pub facing: bool,
    /// Step of the earliest arrival of any agent.
    pub first_goal: bool,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(1.0 - dot / (na * nb))
}

fn signed(a: usize, b: usize) -> isize {
    b as isize - a as isize
}

/// Both agents see each other now and each next move closes the gap along
/// the axis that separates them most.
fn closing(rec: &EpisodeRecord, t: usize, i: usize, j: usize) -> bool {
    let r = (rec.obs_size / 2) as isize;
    let (p, q) = (rec.positions[t][i], rec.positions[t][j]);
    let (dr, dc) = (signed(p.row, q.row), signed(p.col, q.col));
    if dr.abs() > r || dc.abs() > r {
        return false;
    }
    if t + 1 >= rec.positions.len() || !rec.active[t + 1][i] || !rec.active[t + 1][j] {
        return false;
    }
    let (p2, q2) = (rec.positions[t + 1][i], rec.positions[t + 1][j]);
    let (gap, mi, mj) = if dc.abs() >= dr.abs() {
        (dc, signed(p.col, p2.col), signed(q.col, q2.col))
    } else {
        (dr, signed(p.row, p2.row), signed(q.row, q2.row))
    };
    gap != 0 && mi * gap.signum() > 0 && mj * gap.signum() < 0
}

/// Pairwise memory and grid distances for every step where both agents of a
/// pair were active and recorded a memory.
pub fn memory_trace(rec: &EpisodeRecord) -> Result<Vec<TraceRow>, EvalError> {
    let Some(memory) = &rec.memory else {
        return Err(EvalError::Contract("episode was recorded without memory".into()));
    };
    let first_goal = rec.arrivals.iter().flatten().min().copied();
    let n = rec.agents;
    let mut faced = vec![false; n * n];
    let mut rows = Vec::new();
    for (t, mem) in memory.iter().enumerate() {
        for i in 0..n {
            for j in i + 1..n {
                let (Some(a), Some(b)) = (&mem[i], &mem[j]) else { continue };
                let (p, q) = (rec.positions[t][i], rec.positions[t][j]);
                let dr = p.row as f64 - q.row as f64;
                let dc = p.col as f64 - q.col as f64;
                let facing = !faced[i * n + j] && closing(rec, t, i, j);
                if facing {
                    faced[i * n + j] = true;
                }
                rows.push(TraceRow {
                    step: t,
                    agent_a: i,
                    agent_b: j,
                    cosine_distance: cosine_distance(a, b),
                    euclidean_distance: (dr * dr + dc * dc).sqrt(),
                    facing,
                    first_goal: first_goal == Some(t),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<TraceRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<TraceRow>, _>>()?)
}

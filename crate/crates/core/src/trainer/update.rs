use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{adam_step, clip_global_norm, kernels, AdamState, Graph, Tensor, Var, EMPTY_SLOT};
use crate::policy::{CoreKind, Policy, StepGraphInput, OBS_CHANNELS};

use super::rollout::RolloutBatch;
use super::{PPOConfig, TrainerError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Mean KL(old ‖ current) on each minibatch before its step.
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Per step of a segment re-forward: outputs and the transitions they belong to.
struct StepOut {
    logits: Var,
    value: Var,
    rows: Vec<usize>,
}

/// Re-forwards segments from their stored starting memories. The returned
/// steps cover every transition of `segs` exactly once.
///
/// The pool holds the other agents' stored memories as constants, unless
/// `joint` is set: then an agent whose segment is also being re-forwarded
/// contributes its recomputed memory, and gradients cross agents.
fn forward_segments(
    policy: &Policy,
    g: &mut Graph,
    batch: &RolloutBatch,
    segs: &[&[usize]],
    joint: bool,
) -> Result<Vec<StepOut>, TrainerError> {
    let tr = &batch.transitions;
    let cfg = policy.config();
    let (d, hlen, w, m) = (cfg.hidden, cfg.history, policy.memory_width(), cfg.obs_size);
    let mut segs: Vec<&[usize]> = segs.to_vec();
    segs.sort_by_key(|s| std::cmp::Reverse(s.len()));

    // Embeddings for every transition and its history window.
    let mut emb_row = vec![u32::MAX; tr.len()];
    let mut order = Vec::new();
    let mut need = |t: usize, order: &mut Vec<usize>| {
        if emb_row[t] == u32::MAX {
            emb_row[t] = order.len() as u32;
            order.push(t);
        }
    };
    let mut histories: Vec<Vec<Vec<u32>>> = Vec::with_capacity(segs.len());
    for seg in &segs {
        let mut per_step = Vec::with_capacity(seg.len());
        for &t in seg.iter() {
            need(t, &mut order);
            let mut chain = Vec::with_capacity(hlen);
            let mut cur = tr[t].prev;
            while let (Some(p), true) = (cur, chain.len() < hlen) {
                need(p, &mut order);
                chain.push(p);
                cur = tr[p].prev;
            }
            let mut h = vec![EMPTY_SLOT; hlen - chain.len()];
            h.extend(chain.iter().rev().map(|&p| p as u32));
            per_step.push(h);
        }
        histories.push(per_step);
    }
    let per = OBS_CHANNELS * m * m;
    let mut obs = vec![0.0; order.len() * per];
    for (&t, chunk) in order.iter().zip(obs.chunks_mut(per)) {
        tr[t].obs.write_f64(chunk);
    }
    let obs = g.constant(Tensor::new(vec![order.len(), OBS_CHANNELS, m, m], obs)?);
    let emb = policy.encode_graph(g, obs)?;

    let firsts: Vec<usize> = segs.iter().map(|s| emb_row[s[0]] as usize).collect();
    let mut memory = if w > 0 {
        let stored: Vec<f64> = segs.iter().flat_map(|s| tr[s[0]].memory.iter().copied()).collect();
        let stored = g.constant(Tensor::new(vec![segs.len(), w], stored)?);
        let fresh: Vec<bool> = segs.iter().map(|s| tr[s[0]].step == 0).collect();
        if fresh.iter().any(|&f| f) && cfg.core != CoreKind::Rnn {
            let first_emb = g.select_rows(emb, &firsts)?;
            let init = policy.init_memory_graph(g, first_emb)?;
            let pick = fresh.iter().map(|&f| u32::from(f)).collect();
            let mixed = g.stack_rows(&[stored, init], pick, 1)?;
            g.reshape(mixed, &[segs.len(), w])?
        } else {
            stored
        }
    } else {
        g.constant(Tensor::zeros(&[segs.len(), 0]))
    };

    let tokens = if cfg.core == CoreKind::Srmt { cfg.memory_tokens } else { 0 };
    let max_len = segs.first().map_or(0, |s| s.len());
    let mut out = Vec::with_capacity(max_len);
    for k in 0..max_len {
        let p = segs.iter().take_while(|s| s.len() > k).count();
        if k > 0 && g.value(memory).shape()[0] != p {
            memory = g.slice_rows(memory, 0, p)?;
        }
        let rows: Vec<usize> = segs[..p].iter().map(|s| s[k]).collect();
        let current: Vec<usize> = rows.iter().map(|&t| emb_row[t] as usize).collect();
        let history: Vec<u32> = histories[..p]
            .iter()
            .flat_map(|h| h[k].iter().map(|&t| if t == EMPTY_SLOT { t } else { emb_row[t as usize] }))
            .collect();
        let (pool_table, others) = if tokens > 0 {
            let live: HashMap<usize, usize> =
                if joint { rows.iter().enumerate().map(|(i, &t)| (t, i)).collect() } else { HashMap::new() };
            let mut table = Vec::new();
            let mut stored_rows = 0;
            let mut idx: Vec<Vec<(bool, usize)>> = Vec::with_capacity(p);
            for &t in &rows {
                let mut mine = Vec::new();
                for &o in &tr[t].others {
                    match live.get(&o) {
                        Some(&r) => mine.push((true, r)),
                        None => {
                            table.extend_from_slice(&tr[o].memory);
                            mine.push((false, stored_rows));
                            stored_rows += 1;
                        }
                    }
                }
                idx.push(mine);
            }
            // recomputed memories first, stored ones after
            let offset = if live.is_empty() { 0 } else { p * tokens };
            let mut parts = Vec::new();
            if !live.is_empty() {
                parts.push(g.reshape(memory, &[p * tokens, d])?);
            }
            if stored_rows > 0 {
                parts.push(g.constant(Tensor::new(vec![stored_rows * tokens, d], table)?));
            }
            let table = match parts.len() {
                0 => None,
                1 => Some(parts[0]),
                _ => Some(g.concat_rows(&parts)?),
            };
            let others = idx
                .iter()
                .map(|mine| {
                    mine.iter()
                        .flat_map(|&(is_live, r)| {
                            let base = if is_live { r * tokens } else { offset + r * tokens };
                            base..base + tokens
                        })
                        .collect()
                })
                .collect();
            (table, others)
        } else {
            (None, vec![Vec::new(); p])
        };
        let step = policy.step_graph(
            g,
            &StepGraphInput { emb, current: &current, history: &history, memory, pool_table, others: &others },
        )?;
        memory = step.next_memory;
        out.push(StepOut { logits: step.logits, value: step.value, rows });
    }
    Ok(out)
}

fn kl_row(old_logits: &[f64], new_logits: &[f64]) -> f64 {
    let mut lo = vec![0.0; old_logits.len()];
    let mut ln = vec![0.0; new_logits.len()];
    kernels::log_softmax_row(old_logits, &mut lo);
    kernels::log_softmax_row(new_logits, &mut ln);
    lo.iter().zip(&ln).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean KL(old ‖ current policy) over the transitions of `segs`.
pub fn measure_kl(policy: &Policy, batch: &RolloutBatch, segs: &[&[usize]], joint: bool) -> Result<f64, TrainerError> {
    let mut g = Graph::new();
    let steps = forward_segments(policy, &mut g, batch, segs, joint)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &steps {
        let logits = g.value(s.logits);
        for (i, &t) in s.rows.iter().enumerate() {
            sum += kl_row(&batch.transitions[t].logits, logits.row(i));
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Splits shuffled segments into minibatches of about `size` transitions.
/// With `joint`, segments of agents sharing a pool move together.
pub(crate) fn minibatches<'a>(batch: &'a RolloutBatch, size: usize, joint: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a [usize]>> {
    let segments = &batch.segments;
    let mut units: Vec<Vec<usize>> = if joint {
        let mut by_key: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            let t = &batch.transitions[s[0]];
            let key = t.others.iter().copied().fold(s[0], usize::min);
            by_key.entry(key).or_default().push(i);
        }
        by_key.into_values().collect()
    } else {
        (0..segments.len()).map(|i| vec![i]).collect()
    };
    units.shuffle(rng);
    let mut out = Vec::new();
    let mut cur: Vec<&[usize]> = Vec::new();
    let mut count = 0;
    for unit in units {
        for i in unit {
            cur.push(&segments[i]);
            count += segments[i].len();
        }
        if count >= size {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// One PPO update over `batch`: `cfg.epochs` passes of clipped-surrogate
/// minibatch steps with normalized advantages.
pub fn ppo_update(
    policy: &mut Policy,
    adam: &mut AdamState,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<UpdateStats, TrainerError> {
    let tr = &batch.transitions;
    if tr.is_empty() {
        return Ok(UpdateStats::default());
    }
    let n = tr.len() as f64;
    let mean = tr.iter().map(|t| t.advantage).sum::<f64>() / n;
    let var = tr.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    let adv: Vec<f64> = tr.iter().map(|t| (t.advantage - mean) / std).collect();

    let mut stats = UpdateStats::default();
    let mut weight = 0.0;
    for _ in 0..cfg.epochs {
        for mb in minibatches(batch, cfg.minibatch_size, cfg.pool_gradient, rng) {
            let mut g = Graph::new();
            let steps = forward_segments(policy, &mut g, batch, &mb, cfg.pool_gradient)?;
            let count: usize = steps.iter().map(|s| s.rows.len()).sum();
            let mut total: Option<Var> = None;
            let (mut pl, mut vl, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0usize, 0.0);
            for s in &steps {
                let actions: Vec<usize> = s.rows.iter().map(|&t| tr[t].action).collect();
                let old: Vec<f64> = s.rows.iter().map(|&t| tr[t].log_prob).collect();
                let a: Vec<f64> = s.rows.iter().map(|&t| adv[t]).collect();
                let ret: Vec<f64> = s.rows.iter().map(|&t| tr[t].ret).collect();
                let p = s.rows.len();
                let lsm = g.log_softmax(s.logits)?;
                let logp = g.gather_last(lsm, &actions)?;
                let old = g.constant(Tensor::new(vec![p], old)?);
                let diff = g.sub(logp, old)?;
                let ratio = g.exp(diff)?;
                let av = g.constant(Tensor::new(vec![p], a)?);
                let s1 = g.mul(ratio, av)?;
                let rc = g.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)?;
                let s2 = g.mul(rc, av)?;
                let surr = g.minimum(s1, s2)?;
                let surr = g.sum(surr)?;
                let rv = g.constant(Tensor::new(vec![p], ret)?);
                let vd = g.sub(s.value, rv)?;
                let v2 = g.mul(vd, vd)?;
                let v2 = g.sum(v2)?;
                let probs = g.softmax(s.logits)?;
                let plp = g.mul(probs, lsm)?;
                let neg_ent = g.sum(plp)?;

                pl -= g.value(surr).item();
                vl += g.value(v2).item();
                ent -= g.value(neg_ent).item();
                clipped += g.value(ratio).data().iter().filter(|r| (*r - 1.0).abs() > cfg.clip_ratio).count();
                let logits = g.value(s.logits);
                kl += s.rows.iter().enumerate().map(|(i, &t)| kl_row(&tr[t].logits, logits.row(i))).sum::<f64>();

                let a = g.scale(surr, -1.0)?;
                let b = g.scale(v2, cfg.value_coef)?;
                let c = g.scale(neg_ent, cfg.entropy_coef)?;
                let ab = g.add(a, b)?;
                let step_loss = g.add(ab, c)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, step_loss)?,
                    None => step_loss,
                });
            }
            let total = total.expect("minibatch has at least one step");
            let loss = g.scale(total, 1.0 / count as f64)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(TrainerError::NonFinite {
                    iteration,
                    detail: format!("loss {lv}, policy {pl}, value {vl}, entropy {ent}"),
                });
            }
            let mut grads = g.backward(loss).map_err(|e| TrainerError::NonFinite { iteration, detail: e.to_string() })?.params(policy.params());
            let norm = clip_global_norm(&mut grads, cfg.max_grad_norm.unwrap_or(f64::INFINITY));
            adam_step(policy.params_mut().tensors_mut(), &grads, adam, lr)?;

            let c = count as f64;
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += ent;
            stats.clip_fraction += clipped as f64;
            stats.approx_kl += kl;
            stats.grad_norm += norm * c;
            stats.minibatches += 1;
            weight += c;
        }
    }
    for v in [
        &mut stats.policy_loss,
        &mut stats.value_loss,
        &mut stats.entropy,
        &mut stats.clip_fraction,
        &mut stats.approx_kl,
        &mut stats.grad_norm,
    ] {
        *v /= weight;
    }
    Ok(stats)
}

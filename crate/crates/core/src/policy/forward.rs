//! Graph-level forward passes. Every batch row is computed independently, so
//! a row's outputs do not depend on which other rows share the batch.

use std::cmp::Ordering;

use super::{AttnBlock, CoreKind, Linear, Norm, Policy, PolicyError, NUM_ACTIONS, OBS_CHANNELS};
use crate::gridenv::Observation;
use crate::numkit::{Graph, Tensor, Var, EMPTY_SLOT};

/// Inputs of one batched core step, expressed as graph values.
pub struct StepGraphInput<'a> {
    /// Embedding table `[N, d]`.
    pub emb: Var,
    /// Row of `emb` holding each sample's current embedding.
    pub current: &'a [usize],
    /// `B * history` rows of `emb`, oldest first and right-aligned;
    /// [`EMPTY_SLOT`] where the history is shorter.
    pub history: &'a [u32],
    /// Recurrent state `[B, memory_width]`.
    pub memory: Var,
    /// Memory tokens `[M, d]` of other agents.
    pub pool_table: Option<Var>,
    /// Per sample: rows of `pool_table` visible in its shared pool, in
    /// addition to its own memory tokens.
    pub others: &'a [Vec<usize>],
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// `[B, 5]`
    pub logits: Var,
    /// `[B]`
    pub value: Var,
    /// `[B, memory_width]`
    pub next_memory: Var,
}

/// Value-level inputs of one batched core step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// `[B, d]`
    pub current: Tensor,
    /// `[M, d]` embeddings referenced by `history_idx`.
    pub history: Tensor,
    /// `B * history` rows of `history`, or [`EMPTY_SLOT`].
    pub history_idx: Vec<u32>,
    /// `[B, memory_width]`
    pub memory: Tensor,
    /// `[P, memory_width]` memories of agents that can appear in pools.
    pub pool: Tensor,
    /// Per sample: rows of `pool` other than the sample's own memory.
    pub others: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepValues {
    pub logits: Tensor,
    pub values: Vec<f64>,
    pub next_memory: Tensor,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

impl Policy {
    fn lin(&self, g: &mut Graph, l: Linear, x: Var) -> Result<Var, PolicyError> {
        let w = g.param(self.params(), l.w);
        let b = g.param(self.params(), l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var) -> Result<Var, PolicyError> {
        let gain = g.param(self.params(), n.gain);
        let bias = g.param(self.params(), n.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn ffn(&self, g: &mut Graph, blk: &AttnBlock, x: Var) -> Result<Var, PolicyError> {
        let h = self.norm(g, blk.ln_ff, x)?;
        let h = self.lin(g, blk.ff1, h)?;
        let h = g.relu(h)?;
        let h = self.lin(g, blk.ff2, h)?;
        Ok(g.add(x, h)?)
    }

    /// Picks `slots` from every row of a `[B, T, d]` value.
    fn pick_slots(g: &mut Graph, x: Var, slots: &[usize]) -> Result<Var, PolicyError> {
        let s = g.value(x).shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let flat = g.reshape(x, &[b * t, d])?;
        let idx: Vec<usize> = (0..b).flat_map(|r| slots.iter().map(move |&j| r * t + j)).collect();
        let sel = g.select_rows(flat, &idx)?;
        Ok(g.reshape(sel, &[b, slots.len(), d])?)
    }

    /// Encodes `[N, 3, m, m]` observations into `[N, d]` embeddings.
    pub fn encode_graph(&self, g: &mut Graph, obs: Var) -> Result<Var, PolicyError> {
        let enc = &self.layout().encoder;
        let m = self.config().obs_size;
        let shape = g.value(obs).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [OBS_CHANNELS, m, m] {
            return Err(PolicyError::Contract(format!("observation batch shape {:?}, expected [N, 3, {m}, {m}]", shape)));
        }
        let n = shape[0];
        let k = g.param(self.params(), enc.conv_in);
        let mut x = g.conv2d(obs, k)?;
        for blk in &enc.res {
            let y = g.relu(x)?;
            let k1 = g.param(self.params(), blk.conv1);
            let y = g.conv2d(y, k1)?;
            let y = g.relu(y)?;
            let k2 = g.param(self.params(), blk.conv2);
            let y = g.conv2d(y, k2)?;
            x = g.add(x, y)?;
        }
        let x = g.relu(x)?;
        let x = g.reshape(x, &[n, self.config().filters * m * m])?;
        let x = self.lin(g, enc.proj, x)?;
        Ok(g.relu(x)?)
    }

    /// Episode-start recurrent state from first embeddings `[B, d]`.
    pub fn init_memory_graph(&self, g: &mut Graph, emb: Var) -> Result<Var, PolicyError> {
        let b = g.value(emb).shape()[0];
        match self.layout().init_head {
            Some(l) => self.lin(g, l, emb),
            None => Ok(g.constant(Tensor::zeros(&[b, self.memory_width()]))),
        }
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        blk: &AttnBlock,
        x: Var,
        mask: &[bool],
        query_slots: Option<&[usize]>,
    ) -> Result<Var, PolicyError> {
        let h = self.norm(g, blk.ln_q, x)?;
        let (xq, hq) = match query_slots {
            Some(s) => (Self::pick_slots(g, x, s)?, Self::pick_slots(g, h, s)?),
            None => (x, h),
        };
        let q = self.lin(g, blk.q, hq)?;
        let k = self.lin(g, blk.k, h)?;
        let v = self.lin(g, blk.v, h)?;
        let a = g.attention(q, k, v, mask, self.config().heads)?;
        let a = self.lin(g, blk.o, a)?;
        let x1 = g.add(xq, a)?;
        self.ffn(g, blk, x1)
    }

    fn cross_attention(&self, g: &mut Graph, blk: &AttnBlock, x: Var, pool: Var, mask: &[bool]) -> Result<Var, PolicyError> {
        let hq = self.norm(g, blk.ln_q, x)?;
        let kv_norm = blk.ln_kv.expect("cross-attention block has a key/value norm");
        let hkv = self.norm(g, kv_norm, pool)?;
        let q = self.lin(g, blk.q, hq)?;
        let k = self.lin(g, blk.k, hkv)?;
        let v = self.lin(g, blk.v, hkv)?;
        let a = g.attention(q, k, v, mask, self.config().heads)?;
        let a = self.lin(g, blk.o, a)?;
        let x1 = g.add(x, a)?;
        self.ffn(g, blk, x1)
    }

    /// Own memory tokens as `k` parts of shape `[B, d]`.
    fn memory_parts(&self, g: &mut Graph, memory: Var, b: usize) -> Result<Vec<Var>, PolicyError> {
        let (k, d) = (self.config().memory_tokens, self.config().hidden);
        let tokens = g.reshape(memory, &[b * k, d])?;
        if k == 1 {
            return Ok(vec![tokens]);
        }
        (0..k)
            .map(|j| {
                let idx: Vec<usize> = (0..b).map(|r| r * k + j).collect();
                Ok(g.select_rows(tokens, &idx)?)
            })
            .collect()
    }

    /// Shared pool `[B, S, d]` and its key mask. Entries of each row are
    /// ordered by value so the result does not depend on agent order.
    fn assemble_pool(
        &self,
        g: &mut Graph,
        own: &[Var],
        pool_table: Option<Var>,
        others: &[Vec<usize>],
        b: usize,
    ) -> Result<(Var, Vec<bool>), PolicyError> {
        let cols = others.iter().map(Vec::len).max().unwrap_or(0);
        let mut parts = own.to_vec();
        if cols > 0 {
            let table = pool_table.ok_or_else(|| PolicyError::Contract("pool rows given without a pool table".into()))?;
            let rows = g.value(table).shape()[0];
            if others.iter().flatten().any(|&r| r >= rows) {
                return Err(PolicyError::Contract(format!("pool row out of range ({rows} rows)")));
            }
            for c in 0..cols {
                let idx: Vec<usize> = others.iter().map(|o| o.get(c).copied().unwrap_or(0)).collect();
                parts.push(g.select_rows(table, &idx)?);
            }
        }
        let slots = own.len() + cols;
        let mut pick = Vec::with_capacity(b * slots);
        let mut mask = Vec::with_capacity(b * slots);
        for (r, other) in others.iter().enumerate().take(b) {
            let mut entries: Vec<u32> = (0..own.len() as u32).collect();
            entries.extend((0..other.len()).map(|c| (own.len() + c) as u32));
            entries.sort_by(|&p, &q| lex_cmp(g.value(parts[p as usize]).row(r), g.value(parts[q as usize]).row(r)));
            let n = entries.len();
            pick.extend(entries);
            pick.extend(std::iter::repeat_n(EMPTY_SLOT, slots - n));
            mask.extend((0..slots).map(|j| j < n));
        }
        let pool = g.stack_rows(&parts, pick, slots)?;
        Ok((pool, mask))
    }

    /// One recurrent step for a batch of samples.
    pub fn step_graph(&self, g: &mut Graph, input: &StepGraphInput) -> Result<StepVars, PolicyError> {
        let cfg = self.config();
        let layout = self.layout();
        let b = input.current.len();
        let (d, hlen, k) = (cfg.hidden, cfg.history, cfg.memory_tokens);
        if input.history.len() != b * hlen || input.others.len() != b {
            return Err(PolicyError::Contract(format!(
                "batch of {b} needs {} history entries and {b} pool lists, got {} and {}",
                b * hlen,
                input.history.len(),
                input.others.len()
            )));
        }
        let mshape = g.value(input.memory).shape().to_vec();
        if mshape != [b, self.memory_width()] {
            return Err(PolicyError::Contract(format!("memory shape {:?}, expected [{b}, {}]", mshape, self.memory_width())));
        }
        let n_emb = g.value(input.emb).shape()[0];
        if input.current.iter().any(|&i| i >= n_emb)
            || input.history.iter().any(|&i| i != EMPTY_SLOT && i as usize >= n_emb)
        {
            return Err(PolicyError::Contract(format!("embedding row out of range ({n_emb} rows)")));
        }
        let current = g.select_rows(input.emb, input.current)?;

        let (features, next_memory) = match cfg.core {
            CoreKind::Empty => (current, input.memory),
            CoreKind::Rnn => {
                let gru = layout.gru.as_ref().expect("rnn layout");
                let h = input.memory;
                let uz = g.param(self.params(), gru.uz);
                let ur = g.param(self.params(), gru.ur);
                let xz = self.lin(g, gru.wz, current)?;
                let hz = g.matmul(h, uz)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z)?;
                let xr = self.lin(g, gru.wr, current)?;
                let hr = g.matmul(h, ur)?;
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r)?;
                let xn = self.lin(g, gru.wn, current)?;
                let hn = self.lin(g, gru.un, h)?;
                let rn = g.mul(r, hn)?;
                let n = g.add(xn, rn)?;
                let n = g.tanh(n)?;
                let diff = g.sub(h, n)?;
                let zd = g.mul(z, diff)?;
                let h_next = g.add(n, zd)?;
                (h_next, h_next)
            }
            CoreKind::Srmt | CoreKind::Rmt | CoreKind::Attention => {
                let t = cfg.slots();
                let with_memory = cfg.core.has_memory_token();
                let mut parts = Vec::new();
                let own = if with_memory { self.memory_parts(g, input.memory, b)? } else { Vec::new() };
                parts.extend_from_slice(&own);
                let mut hist_part = vec![None; hlen];
                for (j, slot) in hist_part.iter_mut().enumerate() {
                    let col: Vec<u32> = (0..b).map(|r| input.history[r * hlen + j]).collect();
                    if col.iter().all(|&i| i == EMPTY_SLOT) {
                        continue;
                    }
                    let idx: Vec<usize> = col.iter().map(|&i| if i == EMPTY_SLOT { 0 } else { i as usize }).collect();
                    parts.push(g.select_rows(input.emb, &idx)?);
                    *slot = Some((parts.len() - 1) as u32);
                }
                parts.push(current);
                let cur_part = (parts.len() - 1) as u32;
                let mut pick = Vec::with_capacity(b * t);
                for r in 0..b {
                    for j in 0..k {
                        pick.push(if with_memory { j as u32 } else { EMPTY_SLOT });
                    }
                    for (j, part) in hist_part.iter().enumerate() {
                        pick.push(match part {
                            Some(p) if input.history[r * hlen + j] != EMPTY_SLOT => *p,
                            _ => EMPTY_SLOT,
                        });
                    }
                    pick.push(cur_part);
                }
                let mask: Vec<bool> = pick.iter().map(|&p| p != EMPTY_SLOT).collect();
                let x = g.stack_rows(&parts, pick, t)?;
                let x = g.reshape(x, &[b, t * d])?;
                let pos = g.param(self.params(), layout.pos.expect("transformer layout"));
                let x = g.add_row(x, pos)?;
                let mut x = g.reshape(x, &[b, t, d])?;

                let mut query_slots: Vec<usize> = if with_memory { (0..k).collect() } else { Vec::new() };
                query_slots.push(t - 1);
                let pool = if cfg.core == CoreKind::Srmt {
                    Some(self.assemble_pool(g, &own, input.pool_table, input.others, b)?)
                } else {
                    None
                };
                let blocks = layout.self_attn.len();
                for l in 0..blocks {
                    // Only memory and current slots are read after the last block.
                    let q = (l + 1 == blocks).then_some(query_slots.as_slice());
                    x = self.self_attention(g, &layout.self_attn[l], x, &mask, q)?;
                    if let Some((pool, pool_mask)) = &pool {
                        x = self.cross_attention(g, &layout.cross_attn[l], x, *pool, pool_mask)?;
                    }
                }
                let x = self.norm(g, layout.ln_final.expect("transformer layout"), x)?;
                let nq = query_slots.len();
                let flat = g.reshape(x, &[b * nq, d])?;
                let cur_idx: Vec<usize> = (0..b).map(|r| r * nq + nq - 1).collect();
                let features = g.select_rows(flat, &cur_idx)?;
                let next_memory = match layout.memory_head {
                    Some(head) => {
                        let mem_idx: Vec<usize> = (0..b).flat_map(|r| (0..k).map(move |j| r * nq + j)).collect();
                        let m = g.select_rows(flat, &mem_idx)?;
                        let m = self.lin(g, head, m)?;
                        let m = g.tanh(m)?;
                        g.reshape(m, &[b, k * d])?
                    }
                    None => input.memory,
                };
                (features, next_memory)
            }
        };
        let logits = self.lin(g, layout.action, features)?;
        let value = self.lin(g, layout.critic, features)?;
        let value = g.reshape(value, &[b])?;
        Ok(StepVars { logits, value, next_memory })
    }

    /// Flattens observations into a `[N, 3, m, m]` tensor.
    pub fn observation_batch(&self, obs: &[&Observation]) -> Result<Tensor, PolicyError> {
        let m = self.config().obs_size;
        let per = OBS_CHANNELS * m * m;
        let mut data = vec![0.0; obs.len() * per];
        for (o, chunk) in obs.iter().zip(data.chunks_mut(per)) {
            if o.size() != m {
                return Err(PolicyError::Contract(format!("observation size {} but the policy expects {m}", o.size())));
            }
            o.write_f64(chunk);
        }
        Ok(Tensor::new(vec![obs.len(), OBS_CHANNELS, m, m], data)?)
    }

    /// Embeddings `[N, d]` without recording gradients.
    pub fn encode_values(&self, obs: &[&Observation]) -> Result<Tensor, PolicyError> {
        if obs.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config().hidden]));
        }
        let mut g = Graph::new();
        let x = g.constant(self.observation_batch(obs)?);
        let e = self.encode_graph(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    pub fn init_memory_values(&self, emb: &Tensor) -> Result<Tensor, PolicyError> {
        let mut g = Graph::new();
        let e = g.constant(emb.clone());
        let m = self.init_memory_graph(&mut g, e)?;
        Ok(g.value(m).clone())
    }

    pub fn step_values(&self, input: &StepInputs) -> Result<StepValues, PolicyError> {
        let b = input.current.shape()[0];
        let mut g = Graph::new();
        let cur = g.constant(input.current.clone());
        let n_hist = input.history.shape().first().copied().unwrap_or(0);
        let emb = if n_hist > 0 {
            let h = g.constant(input.history.clone());
            g.concat_rows(&[cur, h])?
        } else {
            cur
        };
        let history: Vec<u32> = input.history_idx.iter().map(|&i| if i == EMPTY_SLOT { i } else { i + b as u32 }).collect();
        let current: Vec<usize> = (0..b).collect();
        let memory = g.constant(input.memory.clone());
        let k = if self.config().core.has_memory_token() { self.config().memory_tokens } else { 0 };
        let (pool_table, others) = if k > 0 {
            let p = input.pool.shape()[0];
            let t = g.constant(input.pool.clone());
            let t = g.reshape(t, &[p * k, self.config().hidden])?;
            let others = input.others.iter().map(|o| o.iter().flat_map(|&r| (0..k).map(move |j| r * k + j)).collect()).collect();
            (Some(t), others)
        } else {
            (None, vec![Vec::new(); b])
        };
        let vars = self.step_graph(
            &mut g,
            &StepGraphInput { emb, current: &current, history: &history, memory, pool_table, others: &others },
        )?;
        let logits = g.value(vars.logits).clone();
        debug_assert_eq!(logits.last_dim(), NUM_ACTIONS);
        Ok(StepValues {
            logits,
            values: g.value(vars.value).data().to_vec(),
            next_memory: g.value(vars.next_memory).clone(),
        })
    }
}

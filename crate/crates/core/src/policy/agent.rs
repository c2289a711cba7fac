//! Per-agent convenience API on top of the batched forward pass.

use super::{CoreKind, HistoryBuffer, Policy, PolicyError, StepInputs};
use crate::gridenv::Observation;
use crate::numkit::{Tensor, EMPTY_SLOT};

/// One agent's inputs for a step.
#[derive(Debug, Clone, Copy)]
pub struct AgentInput<'a> {
    pub memory: &'a [f64],
    pub history: &'a HistoryBuffer,
    pub current: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    pub next_memory: Vec<f64>,
}

fn rows_tensor(rows: &[&[f64]], width: usize) -> Result<Tensor, PolicyError> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PolicyError::Contract(format!("vector of length {}, expected {width}", r.len())));
    }
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), width], data)?)
}

impl Policy {
    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>, PolicyError> {
        Ok(self.encode_values(&[obs])?.into_data())
    }

    /// Recurrent state for an agent whose first embedding is `first_embedding`.
    pub fn init_memory(&self, first_embedding: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let emb = rows_tensor(&[first_embedding], self.config().hidden)?;
        Ok(self.init_memory_values(&emb)?.into_data())
    }

    /// Builds batched inputs. `pool` holds every agent's memory; sample `i`
    /// owns `pool[owners[i]]`.
    fn batch_inputs(&self, inputs: &[AgentInput], pool: &[&[f64]], owners: &[usize]) -> Result<StepInputs, PolicyError> {
        let (d, hlen, w) = (self.config().hidden, self.config().history, self.memory_width());
        let current: Vec<&[f64]> = inputs.iter().map(|a| a.current).collect();
        let memory: Vec<&[f64]> = inputs.iter().map(|a| a.memory).collect();
        let mut hist_rows: Vec<&[f64]> = Vec::new();
        let mut history_idx = Vec::with_capacity(inputs.len() * hlen);
        for a in inputs {
            let used = a.history.len().min(hlen);
            history_idx.extend(std::iter::repeat_n(EMPTY_SLOT, hlen - used));
            for e in a.history.iter().skip(a.history.len() - used) {
                history_idx.push(hist_rows.len() as u32);
                hist_rows.push(e);
            }
        }
        let others = owners.iter().map(|&o| (0..pool.len()).filter(|&j| j != o).collect()).collect();
        Ok(StepInputs {
            current: rows_tensor(&current, d)?,
            history: rows_tensor(&hist_rows, d)?,
            history_idx,
            memory: rows_tensor(&memory, w)?,
            pool: rows_tensor(pool, w)?,
            others,
        })
    }

    fn outputs(&self, inputs: &StepInputs) -> Result<Vec<PolicyOutput>, PolicyError> {
        let v = self.step_values(inputs)?;
        let w = self.memory_width();
        Ok((0..v.values.len())
            .map(|i| PolicyOutput {
                logits: v.logits.row(i).to_vec(),
                value: v.values[i],
                next_memory: v.next_memory.data()[i * w..(i + 1) * w].to_vec(),
            })
            .collect())
    }

    /// One agent's step. `pool` holds all agents' memories with this agent's
    /// at `own_index`; only the SRMT core reads the other entries.
    pub fn core_forward(&self, input: &AgentInput, pool: &[Vec<f64>], own_index: usize) -> Result<PolicyOutput, PolicyError> {
        if self.config().core == CoreKind::Srmt && (pool.is_empty() || own_index >= pool.len()) {
            return Err(PolicyError::Contract(format!("own index {own_index} outside a pool of {}", pool.len())));
        }
        let pool: Vec<&[f64]> = if self.config().core == CoreKind::Srmt {
            pool.iter().map(Vec::as_slice).collect()
        } else {
            Vec::new()
        };
        let inputs = self.batch_inputs(std::slice::from_ref(input), &pool, &[own_index])?;
        Ok(self.outputs(&inputs)?.remove(0))
    }

    /// Same as [`Policy::core_forward`]; named for the shared-memory core.
    pub fn srmt_forward(&self, input: &AgentInput, pool: &[Vec<f64>], own_index: usize) -> Result<PolicyOutput, PolicyError> {
        self.core_forward(input, pool, own_index)
    }

    /// Steps every agent against the same pool. Agent `i` owns `inputs[i]`
    /// and its memory is `inputs[i].memory`. Returns the outputs and the next
    /// pool.
    pub fn joint_step(&self, inputs: &[AgentInput]) -> Result<(Vec<PolicyOutput>, Vec<Vec<f64>>), PolicyError> {
        if inputs.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let pool: Vec<&[f64]> = if self.config().core == CoreKind::Srmt {
            inputs.iter().map(|a| a.memory).collect()
        } else {
            Vec::new()
        };
        let owners: Vec<usize> = if pool.is_empty() { vec![0; inputs.len()] } else { (0..inputs.len()).collect() };
        let batch = self.batch_inputs(inputs, &pool, &owners)?;
        let out = self.outputs(&batch)?;
        let next = out.iter().map(|o| o.next_memory.clone()).collect();
        Ok((out, next))
    }
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Action, Cell, EnvState, StepOutput};

/// One JSON-lines record of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Position after the step; `None` once an agent has left.
    pub positions: Vec<Option<Cell>>,
    pub actions: Vec<Option<Action>>,
    pub rewards: Vec<f64>,
    /// Agents that reached a goal during this step.
    pub arrivals: Vec<usize>,
}

#[derive(Debug, Default, Clone)]
pub struct TraceRecorder {
    pub steps: Vec<StepTrace>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a finished step. `rewards` is indexed by agent.
    pub fn record(&mut self, state: &EnvState, out: &StepOutput, rewards: &[f64]) {
        let n = state.num_agents();
        let mut actions = vec![None; n];
        let mut arrivals = Vec::new();
        for r in &out.records {
            actions[r.agent] = Some(r.action);
            if r.arrived {
                arrivals.push(r.agent);
            }
        }
        let positions = state
            .agents
            .iter()
            .zip(&actions)
            .map(|(a, act)| (a.active || act.is_some()).then_some(a.position))
            .collect();
        self.steps.push(StepTrace { step: state.step, positions, actions, rewards: rewards.to_vec(), arrivals });
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

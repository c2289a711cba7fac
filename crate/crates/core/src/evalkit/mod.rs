//! Episode evaluation, the success and efficiency metrics, corridor sweeps
//! and memory-distance traces.

mod metrics;
mod report;
mod run;
mod trace;

use crate::gridenv::EnvError;
use crate::maps::MapError;
use crate::policy::PolicyError;
use crate::trainer::TrainerError;

pub use metrics::{
    congestion, cooperative_success, csr, individual_success, isr, pathfinding_optimal, performance_ratio, scalability,
    soc, sum_of_costs, throughput, EpisodeRecord,
};
pub use report::{aggregate, read_reports_csv, write_reports_csv, MetricReport, Z95};
pub use run::{
    bottleneck_starts, classical_reports, evaluate_tasks, run_episodes, sweep_corridors, sweep_episode_length,
    EpisodeStart, EvalOptions,
};
pub use trace::{cosine_distance, memory_trace, read_trace_csv, write_trace_csv, TraceRow};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

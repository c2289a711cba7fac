//! Small dense-tensor kernel with reverse-mode autodiff and Adam.

mod adam;
mod checkpoint;
mod graph;
mod init;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorEntry};
pub use graph::{Gradients, Graph, Var, EMPTY_SLOT};
pub use init::orthogonal_init;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}


use super::{NumError, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumError::Shape {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumError::Shape { op: "adam_step", detail: format!("{:?} vs {:?}", p.shape(), g.shape()) });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (j, &gj) in gd.iter().enumerate() {
            let mj = &mut m.data_mut()[j];
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * gj;
            let mhat = *mj / bc1;
            let vj = &mut v.data_mut()[j];
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * gj * gj;
            let vhat = *vj / bc2;
            pd[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

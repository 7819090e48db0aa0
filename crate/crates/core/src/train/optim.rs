use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters flagged `decay`.
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            base_lr: 4e-4,
        }
    }
}

/// First/second moments for every parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWParams,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new<T: Scalar>(store: &ParamStore<T>, hyper: AdamWParams) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update using the gradients stored on each parameter.
///
/// Parameters without a gradient are treated as having a zero gradient
/// (they still decay and their moments still age).
pub fn adamw_step(store: &mut ParamStore<f32>, state: &mut OptimState, lr: f64) -> Result<()> {
    let params = store.params_mut();
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("optimizer tracks {} parameters, store has {}", state.m.len(), params.len()),
        ));
    }
    for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
        let grad_len = p.tensor.grad.as_ref().map_or(p.tensor.numel(), Vec::len);
        if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() || grad_len != p.tensor.numel() {
            return Err(Error::shape("adamw_step", format!("moment/gradient shape mismatch for {}", p.name)));
        }
    }

    state.step += 1;
    let h = &state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.decay { lr * h.weight_decay } else { 0.0 };
        let grad = p.tensor.grad.take();
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i] as f64);
            let mi = h.beta1 * m.data()[i] as f64 + (1.0 - h.beta1) * g;
            let vi = h.beta2 * v.data()[i] as f64 + (1.0 - h.beta2) * g * g;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let mut theta = data[i] as f64;
            theta -= decay * theta;
            theta -= lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
            data[i] = theta as f32;
        }
    }
    Ok(())
}

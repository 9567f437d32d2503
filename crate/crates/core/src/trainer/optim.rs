//! Adaptive-moment optimizer with decoupled weight decay, and the cosine
//! learning-rate schedule.

use std::f64::consts::PI;

use crate::encoder::ModelParams;
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to; 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 1.0,
        }
    }
}

/// Moment estimates shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: ModelParams,
    pub second: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let frac = (step as f64 / total).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm(grads: &ModelParams) -> f64 {
    grads.tensors().iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// One update in place. Returns the gradient norm before clipping.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<f64> {
    if grads.tensors().len() != params.tensors().len() || state.first.tensors().len() != params.tensors().len() {
        return Err(Error::Shape("optimizer state, gradients and parameters differ in layout".into()));
    }
    for ((name, g), p) in grads.names().iter().zip(grads.tensors()).zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` is {:?}, param is {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let norm = grad_norm(grads);
    let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut().iter_mut().zip(state.second.tensors_mut().iter_mut()));
    for ((p, g), (m, v)) in tensors {
        let p = p.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            let gi = g.as_slice()[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(norm)
}

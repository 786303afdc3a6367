//! AdamW, cosine learning-rate annealing and global-norm clipping.

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments mirroring the parameter shapes, plus the step count.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptState {
    pub fn new(params: &[Param], config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        OptState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + λ·θ)`.
pub fn adamw_step(params: &mut [Param], grads: &[Tensor], state: &mut OptState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {lr} is negative")));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }

    state.t += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let theta = p.value.data_mut();
        for (((th, gi), mi), vi) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let denom = v_hat.sqrt() + eps;
            // m̂ = v̂ = 0 with eps = 0 is a zero update, not NaN.
            let adam = if denom > 0.0 { m_hat / denom } else { 0.0 };
            *th -= lr * (adam + weight_decay * *th);
        }
    }
    Ok(())
}

/// `0.5·lr_max·(1 + cos(π·step/total))`, exact at both endpoints.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    if step == 0 {
        return lr_max;
    }
    if step == total {
        return 0.0;
    }
    let frac = step as f64 / total as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Euclidean norm over all tensors taken together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale all gradients by `min(1, max_norm/‖g‖)`; returns the factor.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    scale
}

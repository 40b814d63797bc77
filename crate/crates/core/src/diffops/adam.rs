//! Adaptive moment optimizer with optional decoupled weight decay.

use std::collections::BTreeMap;

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected update of every parameter that has a gradient.
/// `lr` overrides the configured rate (for schedules).
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    adam_step_scaled(params, grads, state, cfg, lr, |_| 1.0)
}

/// [`adam_step`] with a per-parameter multiplier on the learning rate.
pub fn adam_step_scaled<F>(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64, scale: F) -> Result<()>
where
    F: Fn(&str) -> f64,
{
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), p.shape()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("adam_step state", m.shape(), p.shape()));
        }
        let lr = lr * scale(name);
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            if cfg.weight_decay > 0.0 {
                pd[i] -= lr * cfg.weight_decay * pd[i];
            }
            pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `base` at step 0 to `floor` at `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

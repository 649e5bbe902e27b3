//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of `params` in place.
///
/// Weight decay is applied first as `p -= lr·wd·p`, then the bias-corrected
/// Adam step; this is the order PyTorch uses.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::dim(
            "adamw_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::powf(b1, t);
    let bc2 = 1.0 - math::powf(b2, t);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
    }
    Ok(())
}

/// AdamW over every tensor of a [`ParamStore`]; tensors flagged `decay = false`
/// skip weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let states = store
            .params()
            .iter()
            .map(|p| AdamState::new(p.value.len()))
            .collect();
        AdamW { config, states }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let c = self.config;
        for (p, s) in store.params_mut().iter_mut().zip(&mut self.states) {
            let wd = if p.decay { c.weight_decay } else { 0.0 };
            adamw_step(
                p.value.data_mut(),
                &p.grad,
                s,
                lr,
                wd,
                (c.beta1, c.beta2),
                c.eps,
            )?;
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over the first `warmup` steps, then cosine decay
/// to zero at `total` steps.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + math::cos(core::f64::consts::PI * progress))
}

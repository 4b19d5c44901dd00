//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use super::params::{ParamId, ParamStore};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update in place. `weight_decay` is applied decoupled from the
/// adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return contract_err(format!(
            "adamw_step: parameter has {} values, gradient {}, moments {}/{}",
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= lr * weight_decay * param[i];
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a [`ParamStore`]. Weight decay applies to matrices only;
/// biases, norm gains and single vectors are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let states = store.iter().map(|(_, p)| AdamState::new(p.value.numel())).collect();
        Self { config, states }
    }

    /// Updates every id in `active`; each must have a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        active: &[ParamId],
        lr: f64,
    ) -> Result<()> {
        for &id in active {
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                return contract_err(format!("missing gradient for parameter {}", store.get(id).name));
            };
            let decay = if store.value(id).shape().len() >= 2 { self.config.weight_decay } else { 0.0 };
            let c = self.config;
            adamw_step(
                store.value_mut(id).data_mut(),
                g,
                &mut self.states[id.0],
                lr,
                c.beta1,
                c.beta2,
                c.eps,
                decay,
            )?;
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as usize;
        Self { base_lr, warmup_steps, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

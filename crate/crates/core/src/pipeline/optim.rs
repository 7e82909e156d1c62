//! Learning-rate schedule and the AdamW optimizer.

use std::f64::consts::PI;

use indexmap::IndexMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// Learning rate of `epoch` (0-based): linear warmup from
/// `learning_rate / lr_start_divisor` to `learning_rate` over
/// `warmup_epochs`, then cosine annealing to `learning_rate / lr_end_divisor`,
/// reached at the final epoch `total_epochs − 1`. Epochs past the end keep
/// the final rate.
///
/// Both phases are written as convex combinations, so the endpoints are
/// exact: epoch 0 gives the start rate and epoch `warmup_epochs` the target.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let target = cfg.learning_rate;
    let start = target / cfg.lr_start_divisor;
    let end = target / cfg.lr_end_divisor;
    if epoch < cfg.warmup_epochs {
        let t = epoch as f64 / cfg.warmup_epochs as f64;
        return start * (1.0 - t) + target * t;
    }
    let span = cfg.total_epochs.saturating_sub(cfg.warmup_epochs + 1);
    if span == 0 {
        return target;
    }
    let t = ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0);
    let w = 0.5 * (1.0 + (PI * t).cos());
    target * w + end * (1.0 - w)
}

/// AdamW hyperparameters (the learning rate is passed per step).
#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 1e-4,
        }
    }
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moment estimates (kept in `f64`) and the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(m, v)` of a parameter, once it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of every parameter:
///
/// ```text
/// θ ← θ·(1 − lr·wd)                         (decoupled decay)
/// m ← β₁m + (1 − β₁)g,  v ← β₂v + (1 − β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε),  m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
/// ```
///
/// `grads` must name every parameter in store order. Nothing is modified
/// when any gradient is non-finite; the error names the parameter.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((pname, p), (gname, g)) in params.iter().zip(grads) {
        if pname != gname || p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {gname:?} {:?} does not match parameter {pname:?} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {pname:?} at element {i} (step {})",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((name, p), (_, g)) in params.iter_mut().zip(grads) {
        let (m, v) = state
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64_lossy();
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            let th = theta.to_f64_lossy() * decay - lr * update;
            *theta = T::from_f64_lossy(th);
        }
    }
    Ok(())
}

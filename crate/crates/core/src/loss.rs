//! Segmentation losses on probability volumes: soft Dice, cross-entropy,
//! focal and their weighted combination.
//!
//! All losses reduce by the mean: Dice is computed per batch item (first
//! axis) and averaged; the voxel-wise losses average over every voxel of
//! every item.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the focal term; Dice gets `1 − alpha`.
    pub alpha: f64,
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Dice smoothing.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.4,
            gamma: 2.0,
            eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_pair<T: Element>(pred: &Var<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Contract(format!("target must be binary, found {v}")));
    }
    Ok(())
}

/// Soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)` per item, averaged.
///
/// Smoothing sits in numerator and denominator so that a perfect binary
/// prediction and a pair of empty masks both score exactly 0.
pub fn dice_loss<T: Element>(pred: &Var<T>, target: &Tensor<T>, eps: f64) -> Result<Var<T>> {
    check_pair(pred, target)?;
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("dice eps must be >= 0, got {eps}")));
    }
    let batch = pred.shape()[0];
    let n = pred.value().numel() / batch;
    let p = pred.reshape(&[batch, n])?;
    let t = Var::constant(target.clone().reshape(&[batch, n])?);
    let inter = p.mul(&t)?.sum_axis(1)?;
    let denom = p.sum_axis(1)?.add(&t.sum_axis(1)?)?.add_scalar(eps);
    let ratio = inter.mul_scalar(2.0).add_scalar(eps).div(&denom)?;
    Ok(ratio.one_minus().mean())
}

/// `−log pₜ` per voxel with `pₜ = p` where the target is 1, else `1 − p`.
fn neg_log_pt<T: Element>(pred: &Var<T>, target: &Tensor<T>) -> Result<(Var<T>, Var<T>)> {
    check_pair(pred, target)?;
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let t = Var::constant(target.clone());
    // pₜ = t·p + (1 − t)(1 − p); exact for binary t.
    let pt = t.mul(&p)?.add(&t.one_minus().mul(&p.one_minus())?)?;
    Ok((pt.log().neg(), pt))
}

/// Binary cross-entropy, mean over voxels.
pub fn ce_loss<T: Element>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    Ok(neg_log_pt(pred, target)?.0.mean())
}

/// Focal loss `mean(−(1 − pₜ)^γ log pₜ)`; identical to [`ce_loss`] for γ = 0.
pub fn focal_loss<T: Element>(pred: &Var<T>, target: &Tensor<T>, gamma: f64) -> Result<Var<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let (nll, pt) = neg_log_pt(pred, target)?;
    if gamma == 0.0 {
        return Ok(nll.mean());
    }
    Ok(pt.one_minus().powf(gamma).mul(&nll)?.mean())
}

/// `α·focal + (1 − α)·dice`.
pub fn combo_loss<T: Element>(pred: &Var<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var<T>> {
    let focal = focal_loss(pred, target, cfg.gamma)?;
    let dice = dice_loss(pred, target, cfg.eps)?;
    focal.mul_scalar(cfg.alpha).add(&dice.mul_scalar(1.0 - cfg.alpha))
}

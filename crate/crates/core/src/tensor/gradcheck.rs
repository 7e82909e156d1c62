//! Central finite-difference verification of analytic gradients (64-bit).

use serde::Serialize;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences of a deep
/// 64-bit graph carry roundoff of order `1e-8` at `h = 1e-5` (the forward
/// value itself jitters by ~100 ulps as the perturbation changes rounding),
/// so gradient entries far below this floor cannot be resolved relatively
/// and are compared on an absolute scale instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates where the central difference straddled a
    /// non-differentiable point (LeakyReLU kink, max-pool switch, clamp edge)
    /// and the one-sided difference on the smooth side was used instead.
    pub one_sided: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Error of `analytic` against the finite differences of one coordinate.
///
/// The central difference is used unless it disagrees; then, if one of the
/// one-sided differences agrees, the step crossed a kink on the other side
/// and the function is smooth on the agreeing side, whose difference is a
/// valid (first-order) oracle. Returns the error and whether the one-sided
/// fallback was taken.
fn coordinate_error(analytic: f64, base: f64, plus: f64, minus: f64, h: f64, tol: f64) -> (f64, bool) {
    let central = relative_error(analytic, (plus - minus) / (2.0 * h));
    if central < tol {
        return (central, false);
    }
    let forward = relative_error(analytic, (plus - base) / h);
    let backward = relative_error(analytic, (base - minus) / h);
    let one_sided = forward.min(backward);
    if one_sided < tol {
        (one_sided, true)
    } else {
        (central, false)
    }
}

/// Checks `f` (scalar-valued) at `x` over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|i| (0, i)).collect();
    finite_diff_check_many(|v| f(&v[0]), std::slice::from_ref(x), &coords, h, tol)
}

/// Checks a scalar function of several inputs on the given
/// `(input, flat index)` coordinates.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = values.iter().cloned().map(Var::constant).collect();
        let y = f(&vars)?;
        if y.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                y.shape()
            )));
        }
        Ok(y.value().item())
    };

    let base = eval(inputs)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic; finite differences are meaningless".into(),
        ));
    }

    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::param).collect();
    f(&leaves)?.backward()?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        one_sided: 0,
        tolerance: tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(which, idx) in coords {
        let orig = inputs[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = orig - h;
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[which].data()[idx];
        let (rel, fallback) = coordinate_error(a, base, plus, minus, h, tol);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        report.one_sided += usize::from(fallback);
        if !fallback {
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        }
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst = (which, idx);
        }
        report.checked += 1;
    }
    Ok(report)
}

//! Elementwise unary and broadcasting binary operations.

use super::super::{strides, Element, Tensor, Var};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (aligned on the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out` in
/// row-major order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    let last = nd - 1;
    let (la, lb, lext) = (sa[last], sb[last], out[last]);
    let mut i = 0;
    loop {
        // Innermost axis in a tight loop.
        for j in 0..lext {
            f(i + j, ia + j * la, ib + j * lb);
        }
        i += lext;
        if i >= total {
            break;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            coords[d] = 0;
        }
    }
}

type BinFn<T> = fn(T, T) -> T;

fn binary<T: Element>(
    name: &'static str,
    a: &Var<T>,
    b: &Var<T>,
    f: BinFn<T>,
    // Partial derivatives given (a, b).
    da: BinFn<T>,
    db: BinFn<T>,
) -> Result<Var<T>> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() == bv.shape() {
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        return Ok(Var::from_op(
            name,
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |ctx| {
                let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
                let ga = ctx.needs[0].then(|| {
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * da(x, y))
                        .collect()
                });
                let gb = ctx.needs[1].then(|| {
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * db(x, y))
                        .collect()
                });
                Ok(vec![ga, gb])
            }),
        ));
    }
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let sa = broadcast_strides(av.shape(), &out_shape);
    let sb = broadcast_strides(bv.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = vec![T::zero(); n];
    let (xa, xb) = (av.data(), bv.data());
    for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| data[i] = f(xa[ia], xb[ib]));
    let shape_for_bw = out_shape.clone();
    Ok(Var::from_op(
        name,
        Tensor::from_parts(out_shape, data),
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            let mut ga = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gb = ctx.needs[1].then(|| vec![T::zero(); y.len()]);
            for_each_broadcast(&shape_for_bw, &sa, &sb, |i, ia, ib| {
                let g = ctx.grad[i];
                if let Some(ga) = ga.as_mut() {
                    ga[ia] = ga[ia] + g * da(x[ia], y[ib]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] = gb[ib] + g * db(x[ia], y[ib]);
                }
            });
            Ok(vec![ga, gb])
        }),
    ))
}

fn unary<T: Element>(
    name: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    // Derivative given (input, output).
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let out = x.value().map(f);
    Var::from_op(
        name,
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.input(0).data().iter().zip(ctx.output.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            Ok(vec![Some(g)])
        }),
    )
}

/// Activation functions used by the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    LeakyRelu { slope: f64 },
    Sigmoid,
    Gelu,
}

impl<T: Element> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("add", self, other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("sub", self, other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| b.recip(),
            |a, b| -a / (b * b),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::from_f64_lossy(c);
        unary("add_scalar", self, move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<T> {
        let c = T::from_f64_lossy(c);
        unary("mul_scalar", self, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<T> {
        unary("one_minus", self, |x| T::one() - x, |_, _| -T::one())
    }

    pub fn log(&self) -> Var<T> {
        unary("log", self, |x| x.ln(), |x, _| x.recip())
    }

    pub fn exp(&self) -> Var<T> {
        unary("exp", self, |x| x.exp(), |_, y| y)
    }

    /// `x^p` for a scalar exponent. The derivative at `p == 0` is exactly 0.
    pub fn powf(&self, p: f64) -> Var<T> {
        let pt = T::from_f64_lossy(p);
        unary(
            "powf",
            self,
            move |x| if p == 0.0 { T::one() } else { x.powf(pt) },
            move |x, _| {
                if p == 0.0 {
                    T::zero()
                } else if p == 1.0 {
                    T::one()
                } else {
                    pt * x.powf(pt - T::one())
                }
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        unary(
            "clamp",
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::from_f64_lossy(slope);
        unary(
            "leaky_relu",
            self,
            move |x| if x >= T::zero() { x } else { x * s },
            move |x, _| if x >= T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(
            "sigmoid",
            self,
            |x| {
                // Split by sign so exp never overflows.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&self) -> Var<T> {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
        unary(
            "gelu",
            self,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn activation(&self, kind: ActivationKind) -> Var<T> {
        match kind {
            ActivationKind::LeakyRelu { slope } => self.leaky_relu(slope),
            ActivationKind::Sigmoid => self.sigmoid(),
            ActivationKind::Gelu => self.gelu(),
        }
    }
}

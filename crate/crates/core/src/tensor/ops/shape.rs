//! Data-movement operations: reshape, permute, concatenation and cyclic roll.

use super::super::{strides, Element, Tensor, Var};
use super::reduce::split_axis;
use crate::error::{Error, Result};

/// Gathers `src` (with shape `shape`) into the layout of `shape` permuted by
/// `perm`, i.e. `out[c] = src[c'[perm]]`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let s: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut coords = vec![0usize; nd];
    let mut idx = 0usize;
    let (ls, lext) = (s[nd - 1], out_shape[nd - 1]);
    loop {
        for j in 0..lext {
            out.push(src[idx + j * ls]);
        }
        if out.len() == total {
            break;
        }
        let mut d = nd - 1;
        loop {
            d -= 1;
            coords[d] += 1;
            idx += s[d];
            if coords[d] < out_shape[d] {
                break;
            }
            idx -= s[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Concatenates along `axis`; every other extent must agree.
pub fn concat<T: Element>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let base = first.shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
    }
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {base:?} vs {s:?}"
            )));
        }
        extents.push(s[axis]);
    }
    let total_axis: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            out.extend_from_slice(&p.value().data()[o * e * inner..][..e * inner]);
        }
    }
    Ok(Var::from_op(
        "concat",
        Tensor::from_parts(out_shape, out),
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut grads: Vec<Option<Vec<T>>> = ctx
                .needs
                .iter()
                .zip(&extents)
                .map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(g) = g {
                        g.extend_from_slice(&ctx.grad[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            Ok(grads)
        }),
    ))
}

/// Toroidal roll: element at coordinate `c` moves to `(c + shift) mod n`.
fn roll_data<T: Copy>(src: &[T], shape: &[usize], shifts: &[isize]) -> Vec<T> {
    let st = strides(shape);
    let nd = shape.len();
    let total = src.len();
    let mut out = src.to_vec();
    if total == 0 {
        return out;
    }
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &n)| s.rem_euclid(n as isize) as usize)
        .collect();
    let mut coords = vec![0usize; nd];
    for &v in src {
        let mut dst = 0;
        for d in 0..nd {
            let c = coords[d] + norm[d];
            let c = if c >= shape[d] { c - shape[d] } else { c };
            dst += c * st[d];
        }
        out[dst] = v;
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

impl<T: Element> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let n: usize = shape.iter().product();
        if n != self.value().numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value().data().to_vec());
        Ok(Var::from_op(
            "reshape",
            out,
            vec![self.clone()],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.to_vec())])),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value().data(), &shape, perm);
        let inv = inverse_permutation(perm);
        Ok(Var::from_op(
            "permute",
            Tensor::from_parts(out_shape.clone(), data),
            vec![self.clone()],
            Box::new(move |ctx| Ok(vec![Some(permute_data(ctx.grad, &out_shape, &inv))])),
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&self) -> Result<Var<T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::shape("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(&perm)
    }

    /// Cyclic shift with one offset per axis.
    pub fn roll(&self, shifts: &[isize]) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shifts.len() != shape.len() {
            return Err(Error::shape(format!(
                "roll needs {} offsets, got {}",
                shape.len(),
                shifts.len()
            )));
        }
        if shifts.iter().zip(&shape).all(|(&s, &n)| s.rem_euclid(n as isize) == 0) {
            return Ok(self.clone());
        }
        let data = roll_data(self.value().data(), &shape, shifts);
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        Ok(Var::from_op(
            "roll",
            Tensor::from_parts(shape.clone(), data),
            vec![self.clone()],
            Box::new(move |ctx| Ok(vec![Some(roll_data(ctx.grad, &shape, &back))])),
        ))
    }
}

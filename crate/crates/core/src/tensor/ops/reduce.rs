use super::super::{Element, Tensor, Var};
use crate::error::{Error, Result};

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Var<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Var<T> {
        let s: T = self.value().data().iter().copied().sum();
        Var::from_op(
            "sum",
            Tensor::scalar(s),
            vec![self.clone()],
            Box::new(|ctx| {
                let n = ctx.input(0).numel();
                Ok(vec![Some(vec![ctx.grad[0]; n])])
            }),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axis`, removing it. Summing the last remaining axis of a
    /// 1-D tensor yields a one-element tensor.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &x[(o * extent + a) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Var::from_op(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let src = &ctx.grad[o * inner..][..inner];
                    for a in 0..extent {
                        g[(o * extent + a) * inner..][..inner].copy_from_slice(src);
                    }
                }
                Ok(vec![Some(g)])
            }),
        ))
    }
}

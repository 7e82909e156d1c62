use super::super::{Element, Tensor, Var};
use super::reduce::split_axis;
use crate::error::{Error, Result};

impl<T: Element> Var<T> {
    /// Softmax along `axis`. `-inf` entries map to exactly zero; a slice with
    /// no finite entry is a [`Error::DegenerateMask`].
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..extent {
                    max = max.max(x[base + a * inner]);
                }
                if max == T::neg_infinity() {
                    return Err(Error::DegenerateMask { slice: o * inner + i });
                }
                let mut sum = T::zero();
                for a in 0..extent {
                    let e = (x[base + a * inner] - max).exp();
                    y[base + a * inner] = e;
                    sum = sum + e;
                }
                let inv = sum.recip();
                for a in 0..extent {
                    y[base + a * inner] = y[base + a * inner] * inv;
                }
            }
        }
        Ok(Var::from_op(
            "softmax",
            Tensor::from_parts(shape, y),
            vec![self.clone()],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let mut dot = T::zero();
                        for a in 0..extent {
                            let j = base + a * inner;
                            dot = dot + g[j] * y[j];
                        }
                        for a in 0..extent {
                            let j = base + a * inner;
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm of empty shape"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm over {c} channels got gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64_lossy(eps);
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let rows = x.len() / c;
        let cn = T::from_usize(c).unwrap();
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * c..][..c];
            let mean = xr.iter().copied().sum::<T>() / cn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = gm[j] * h + bt[j];
            }
        }
        Ok(Var::from_op(
            "layer_norm",
            Tensor::from_parts(shape, y),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gm = ctx.input(1).data();
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); g.len()]);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gh = vec![T::zero(); c];
                for r in 0..rows {
                    let gr = &g[r * c..][..c];
                    let hr = &xhat[r * c..][..c];
                    for j in 0..c {
                        ggamma[j] = ggamma[j] + gr[j] * hr[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut mean_gh = T::zero();
                        let mut mean_ghh = T::zero();
                        for j in 0..c {
                            gh[j] = gr[j] * gm[j];
                            mean_gh = mean_gh + gh[j];
                            mean_ghh = mean_ghh + gh[j] * hr[j];
                        }
                        mean_gh = mean_gh / cn;
                        mean_ghh = mean_ghh / cn;
                        for j in 0..c {
                            gx[r * c + j] = rstd[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
                Ok(vec![gx, Some(ggamma), Some(gbeta)])
            }),
        ))
    }
}

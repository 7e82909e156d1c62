use super::super::{Element, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Element> Var<T> {
    /// Non-overlapping max pooling (stride == kernel) on `[B, C, D, H, W]`.
    ///
    /// Within a window the first maximum in z-y-x scan order receives the
    /// gradient.
    pub fn maxpool3d(&self, kernel: [usize; 3]) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 5 {
            return Err(Error::shape(format!("maxpool3d expects 5-D input, got {shape:?}")));
        }
        let (bc, ext) = (shape[0] * shape[1], [shape[2], shape[3], shape[4]]);
        if kernel.contains(&0) || ext.iter().zip(&kernel).any(|(e, k)| e % k != 0) {
            return Err(Error::shape(format!(
                "maxpool3d extents {ext:?} not divisible by kernel {kernel:?}"
            )));
        }
        let out_ext = [ext[0] / kernel[0], ext[1] / kernel[1], ext[2] / kernel[2]];
        let (pin, pout) = (ext.iter().product::<usize>(), out_ext.iter().product::<usize>());
        let x = self.value().data();
        let mut out = Vec::with_capacity(bc * pout);
        let mut argmax = Vec::with_capacity(bc * pout);
        for c in 0..bc {
            let base = c * pin;
            for oz in 0..out_ext[0] {
                for oy in 0..out_ext[1] {
                    for ox in 0..out_ext[2] {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for kz in 0..kernel[0] {
                            for ky in 0..kernel[1] {
                                for kx in 0..kernel[2] {
                                    let z = oz * kernel[0] + kz;
                                    let y = oy * kernel[1] + ky;
                                    let xx = ox * kernel[2] + kx;
                                    let i = base + (z * ext[1] + y) * ext[2] + xx;
                                    if best_idx == usize::MAX || x[i] > best {
                                        best = x[i];
                                        best_idx = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend(out_ext);
        Ok(Var::from_op(
            "maxpool3d",
            Tensor::from_parts(out_shape, out),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.input(0).numel()];
                for (&i, &g) in argmax.iter().zip(ctx.grad) {
                    gx[i] = gx[i] + g;
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }
}

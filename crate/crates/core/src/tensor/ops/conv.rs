//! 3-D convolution and transposed convolution on `[B, C, D, H, W]` tensors.
//!
//! Both are lowered to GEMM through `im2col`/`col2im`. The column buffer is
//! built for a slab of output depth slices at a time so the scratch memory
//! stays bounded regardless of volume size.

use super::super::{gemm, Element, MatLayout, Tensor, Var};
use crate::error::{Error, Result};

/// Target number of scratch elements per column slab.
const COLUMN_BUDGET: usize = 1 << 22;

/// Kernel, stride and zero-padding per spatial axis (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn cube(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// 3³ kernel, stride 1, padding 1: shape preserving.
    pub fn same3() -> Self {
        Self::cube(3, 1, 1)
    }

    pub fn pointwise() -> Self {
        Self::cube(1, 1, 0)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents of a convolution over `input`.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(Error::shape("convolution stride must be >= 1"));
            }
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.kernel[a] > padded {
                return Err(Error::shape(format!(
                    "kernel {:?} larger than padded input {:?} (padding {:?})",
                    self.kernel, input, self.padding
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution over `input`.
    pub fn transpose_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(Error::shape("convolution stride must be >= 1"));
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::shape(format!(
                    "transposed convolution of {input:?} with {self:?} has empty output"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(Error::shape(format!(
            "expected a [B, C, D, H, W] tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]]))
}

/// Depth-slab ranges of the output such that the column buffer stays near
/// [`COLUMN_BUDGET`].
fn slabs(rows: usize, out: [usize; 3]) -> Vec<(usize, usize)> {
    let plane = out[1] * out[2];
    let per = (COLUMN_BUDGET / (rows * plane).max(1)).clamp(1, out[0]);
    (0..out[0])
        .step_by(per)
        .map(|z0| (z0, (z0 + per).min(out[0])))
        .collect()
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`, i.e.
/// the outputs `o` with `0 <= o*s + k - p < n`.
fn valid_range(n: usize, out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  =>  o >= ceil((p - k) / s)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
    let hi = if n + p <= k {
        0
    } else {
        ((n - 1 + p - k) / s + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Fills `cols` (`[channels * taps, slab columns]`) from `vol`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    vol: &[T],
    channels: usize,
    input: [usize; 3],
    g: &ConvGeometry,
    out: [usize; 3],
    z0: usize,
    z1: usize,
    cols: &mut [T],
) {
    let [d, h, w] = input;
    let [kd, kh, kw] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.padding;
    let plane = out[1] * out[2];
    let ncols = (z1 - z0) * plane;
    let mut r = 0;
    for c in 0..channels {
        let vc = &vol[c * d * h * w..][..d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(h, out[1], sy, ky, py);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(w, out[2], sx, kx, px);
                    let row = &mut cols[r * ncols..][..ncols];
                    r += 1;
                    for oz in z0..z1 {
                        let dz = &mut row[(oz - z0) * plane..][..plane];
                        let iz = (oz * sz + kz) as isize - pz as isize;
                        if iz < 0 || iz >= d as isize {
                            dz.fill(T::zero());
                            continue;
                        }
                        let vz = &vc[iz as usize * h * w..][..h * w];
                        for oy in 0..out[1] {
                            let dst = &mut dz[oy * out[2]..][..out[2]];
                            if oy < ylo || oy >= yhi {
                                dst.fill(T::zero());
                                continue;
                            }
                            let iy = oy * sy + ky - py;
                            let src = &vz[iy * w..][..w];
                            dst[..xlo].fill(T::zero());
                            dst[xhi..].fill(T::zero());
                            if xlo == xhi {
                                continue;
                            }
                            if sx == 1 {
                                let x0 = xlo + kx - px;
                                dst[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    dst[ox] = src[ox * sx + kx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `vol`; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    input: [usize; 3],
    g: &ConvGeometry,
    out: [usize; 3],
    z0: usize,
    z1: usize,
    vol: &mut [T],
) {
    let [d, h, w] = input;
    let [kd, kh, kw] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.padding;
    let plane = out[1] * out[2];
    let ncols = (z1 - z0) * plane;
    let mut r = 0;
    for c in 0..channels {
        let vc = &mut vol[c * d * h * w..][..d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(h, out[1], sy, ky, py);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(w, out[2], sx, kx, px);
                    let row = &cols[r * ncols..][..ncols];
                    r += 1;
                    for oz in z0..z1 {
                        let iz = (oz * sz + kz) as isize - pz as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let sz_row = &row[(oz - z0) * plane..][..plane];
                        let vz = &mut vc[iz as usize * h * w..][..h * w];
                        for oy in ylo..yhi {
                            let iy = oy * sy + ky - py;
                            let src = &sz_row[oy * out[2]..][..out[2]];
                            let dst = &mut vz[iy * w..][..w];
                            if xlo == xhi {
                                continue;
                            }
                            if sx == 1 {
                                let x0 = xlo + kx - px;
                                dst[x0..x0 + (xhi - xlo)]
                                    .iter_mut()
                                    .zip(&src[xlo..xhi])
                                    .for_each(|(d, s)| *d = *d + *s);
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ox * sx + kx - px;
                                    dst[ix] = dst[ix] + src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], batch: usize, per_channel: usize) {
    let ch = bias.len();
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            out[(b * ch + c) * per_channel..][..per_channel]
                .iter_mut()
                .for_each(|v| *v = *v + bv);
        }
    }
}

fn channel_sums<T: Element>(g: &[T], batch: usize, ch: usize, per_channel: usize) -> Vec<T> {
    let mut s = vec![T::zero(); ch];
    for b in 0..batch {
        for (c, acc) in s.iter_mut().enumerate() {
            *acc = *acc + g[(b * ch + c) * per_channel..][..per_channel].iter().copied().sum();
        }
    }
    s
}

fn check_bias<T: Element>(bias: Option<&Var<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

impl<T: Element> Var<T> {
    /// Cross-correlation with weights `[Co, Ci, kd, kh, kw]` and optional
    /// bias `[Co]`.
    pub fn conv3d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        geom: ConvGeometry,
    ) -> Result<Var<T>> {
        let (batch, ci, input) = spatial(self.shape())?;
        let ws = weight.shape();
        if ws.len() != 5 || ws[1] != ci || ws[2..] != geom.kernel {
            return Err(Error::shape(format!(
                "conv3d weight {ws:?} incompatible with input {:?} and kernel {:?}",
                self.shape(),
                geom.kernel
            )));
        }
        let co = ws[0];
        check_bias(bias, co)?;
        let out_ext = geom.conv_output(input)?;
        let (pin, pout) = (input.iter().product::<usize>(), out_ext.iter().product::<usize>());
        let rows = ci * geom.taps();
        let plane = out_ext[1] * out_ext[2];
        let chunks = slabs(rows, out_ext);

        let x = self.value().data();
        let w = weight.value().data();
        let mut out = vec![T::zero(); batch * co * pout];
        let mut cols = Vec::new();
        for b in 0..batch {
            let xb = &x[b * ci * pin..][..ci * pin];
            let ob = &mut out[b * co * pout..][..co * pout];
            for &(z0, z1) in &chunks {
                let ncols = (z1 - z0) * plane;
                cols.resize(rows * ncols, T::zero());
                im2col(xb, ci, input, &geom, out_ext, z0, z1, &mut cols);
                gemm(
                    w,
                    MatLayout::row_major(co, rows),
                    &cols,
                    MatLayout::row_major(rows, ncols),
                    T::zero(),
                    &mut ob[z0 * plane..],
                    MatLayout::row_major(co, ncols).with_row_stride(pout),
                );
            }
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.value().data(), batch, pout);
        }

        let mut out_shape = vec![batch, co];
        out_shape.extend(out_ext);
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Var::from_op(
            "conv3d",
            Tensor::from_parts(out_shape, out),
            parents,
            Box::new(move |ctx| {
                let x = ctx.input(0).data();
                let w = ctx.input(1).data();
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gw = ctx.needs[1].then(|| vec![T::zero(); w.len()]);
                let mut cols = Vec::new();
                for b in 0..batch {
                    let xb = &x[b * ci * pin..][..ci * pin];
                    let gb = &g[b * co * pout..][..co * pout];
                    for &(z0, z1) in &chunks {
                        let ncols = (z1 - z0) * plane;
                        cols.resize(rows * ncols, T::zero());
                        let gl = MatLayout::row_major(co, ncols).with_row_stride(pout);
                        if let Some(gw) = gw.as_mut() {
                            im2col(xb, ci, input, &geom, out_ext, z0, z1, &mut cols);
                            gemm(
                                &gb[z0 * plane..],
                                gl,
                                &cols,
                                MatLayout::transposed(rows, ncols),
                                T::one(),
                                gw,
                                MatLayout::row_major(co, rows),
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            gemm(
                                w,
                                MatLayout::transposed(co, rows),
                                &gb[z0 * plane..],
                                gl,
                                T::zero(),
                                &mut cols,
                                MatLayout::row_major(rows, ncols),
                            );
                            col2im(
                                &cols,
                                ci,
                                input,
                                &geom,
                                out_ext,
                                z0,
                                z1,
                                &mut gx[b * ci * pin..][..ci * pin],
                            );
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.needs[2].then(|| channel_sums(g, batch, co, pout)));
                }
                Ok(grads)
            }),
        ))
    }

    /// Transposed convolution with weights `[Ci, Co, kd, kh, kw]`; the adjoint
    /// of [`Var::conv3d`] with the same weights and geometry.
    pub fn conv_transpose3d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        geom: ConvGeometry,
    ) -> Result<Var<T>> {
        let (batch, ci, input) = spatial(self.shape())?;
        let ws = weight.shape();
        if ws.len() != 5 || ws[0] != ci || ws[2..] != geom.kernel {
            return Err(Error::shape(format!(
                "conv_transpose3d weight {ws:?} incompatible with input {:?} and kernel {:?}",
                self.shape(),
                geom.kernel
            )));
        }
        let co = ws[1];
        check_bias(bias, co)?;
        let out_ext = geom.transpose_output(input)?;
        if geom.conv_output(out_ext)? != input {
            return Err(Error::shape(format!(
                "transposed convolution geometry {geom:?} is not invertible for {input:?}"
            )));
        }
        let (pin, pout) = (input.iter().product::<usize>(), out_ext.iter().product::<usize>());
        let rows = co * geom.taps();
        let plane = input[1] * input[2];
        let chunks = slabs(rows, input);

        let x = self.value().data();
        let w = weight.value().data();
        let mut out = vec![T::zero(); batch * co * pout];
        let mut cols = Vec::new();
        for b in 0..batch {
            let xb = &x[b * ci * pin..][..ci * pin];
            let ob = &mut out[b * co * pout..][..co * pout];
            for &(z0, z1) in &chunks {
                let ncols = (z1 - z0) * plane;
                cols.resize(rows * ncols, T::zero());
                gemm(
                    w,
                    MatLayout::transposed(ci, rows),
                    &xb[z0 * plane..],
                    MatLayout::row_major(ci, ncols).with_row_stride(pin),
                    T::zero(),
                    &mut cols,
                    MatLayout::row_major(rows, ncols),
                );
                col2im(&cols, co, out_ext, &geom, input, z0, z1, ob);
            }
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.value().data(), batch, pout);
        }

        let mut out_shape = vec![batch, co];
        out_shape.extend(out_ext);
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Var::from_op(
            "conv_transpose3d",
            Tensor::from_parts(out_shape, out),
            parents,
            Box::new(move |ctx| {
                let x = ctx.input(0).data();
                let w = ctx.input(1).data();
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gw = ctx.needs[1].then(|| vec![T::zero(); w.len()]);
                let mut cols = Vec::new();
                for b in 0..batch {
                    let xb = &x[b * ci * pin..][..ci * pin];
                    let gb = &g[b * co * pout..][..co * pout];
                    for &(z0, z1) in &chunks {
                        let ncols = (z1 - z0) * plane;
                        cols.resize(rows * ncols, T::zero());
                        im2col(gb, co, out_ext, &geom, input, z0, z1, &mut cols);
                        let xl = MatLayout::row_major(ci, ncols).with_row_stride(pin);
                        if let Some(gx) = gx.as_mut() {
                            gemm(
                                w,
                                MatLayout::row_major(ci, rows),
                                &cols,
                                MatLayout::row_major(rows, ncols),
                                T::zero(),
                                &mut gx[b * ci * pin + z0 * plane..],
                                xl,
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            gemm(
                                &xb[z0 * plane..],
                                xl,
                                &cols,
                                MatLayout::transposed(rows, ncols),
                                T::one(),
                                gw,
                                MatLayout::row_major(ci, rows),
                            );
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.needs[2].then(|| channel_sums(g, batch, co, pout)));
                }
                Ok(grads)
            }),
        ))
    }
}

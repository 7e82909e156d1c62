use super::super::{gemm, Element, MatLayout, Tensor, Var};
use super::elementwise::{broadcast_shape, broadcast_strides, for_each_broadcast};
use crate::error::{Error, Result};

struct Plan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(out_batch, a_batch, b_batch)` triples.
    batches: Vec<(usize, usize, usize)>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs at least 2-D operands, got {a:?} and {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a:?} x {b:?}"
        )));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ba, bb).map_err(|_| {
        Error::shape(format!("matmul batch extents not broadcastable: {a:?} x {b:?}"))
    })?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut batches = Vec::new();
    for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| batches.push((o, ia, ib)));
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(Plan {
        m,
        k,
        n,
        out_shape,
        batches,
    })
}

impl<T: Element> Var<T> {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let p = plan(self.shape(), other.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let (a, b) = (self.value().data(), other.value().data());
        let mut out = vec![T::zero(); p.out_shape.iter().product()];

        if other.shape().len() == 2 {
            // Every batch shares `b`: fold the batch into the row axis.
            let rows = a.len() / k;
            gemm(
                a,
                MatLayout::row_major(rows, k),
                b,
                MatLayout::row_major(k, n),
                T::zero(),
                &mut out,
                MatLayout::row_major(rows, n),
            );
        } else {
            for &(o, ia, ib) in &p.batches {
                gemm(
                    &a[ia * m * k..][..m * k],
                    MatLayout::row_major(m, k),
                    &b[ib * k * n..][..k * n],
                    MatLayout::row_major(k, n),
                    T::zero(),
                    &mut out[o * m * n..][..m * n],
                    MatLayout::row_major(m, n),
                );
            }
        }

        let out = Tensor::from_parts(p.out_shape.clone(), out);
        let b_is_matrix = other.shape().len() == 2;
        let batches = p.batches;
        Ok(Var::from_op(
            "matmul",
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
                let g = ctx.grad;
                let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.len()]);
                let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.len()]);
                if b_is_matrix {
                    let rows = a.len() / k;
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ
                        gemm(
                            g,
                            MatLayout::row_major(rows, n),
                            b,
                            MatLayout::transposed(k, n),
                            T::zero(),
                            ga,
                            MatLayout::row_major(rows, k),
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = Aᵀ · dC
                        gemm(
                            a,
                            MatLayout::transposed(rows, k),
                            g,
                            MatLayout::row_major(rows, n),
                            T::zero(),
                            gb,
                            MatLayout::row_major(k, n),
                        );
                    }
                } else {
                    for &(o, ia, ib) in &batches {
                        let gc = &g[o * m * n..][..m * n];
                        if let Some(ga) = ga.as_mut() {
                            gemm(
                                gc,
                                MatLayout::row_major(m, n),
                                &b[ib * k * n..][..k * n],
                                MatLayout::transposed(k, n),
                                T::one(),
                                &mut ga[ia * m * k..][..m * k],
                                MatLayout::row_major(m, k),
                            );
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm(
                                &a[ia * m * k..][..m * k],
                                MatLayout::transposed(m, k),
                                gc,
                                MatLayout::row_major(m, n),
                                T::one(),
                                &mut gb[ib * k * n..][..k * n],
                                MatLayout::row_major(k, n),
                            );
                        }
                    }
                }
                Ok(vec![ga, gb])
            }),
        ))
    }
}

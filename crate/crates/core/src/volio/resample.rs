//! Temporal averaging, resampling and intensity normalization.

use serde::{Deserialize, Serialize};

use super::{Series, Volume};
use crate::error::{Error, Result};

/// Voxel-wise mean over the frames of a series.
pub fn temporal_mean(series: &Series) -> Volume {
    let n = series.voxels();
    let mut acc = vec![0.0; n];
    for t in 0..series.frames {
        for (a, v) in acc.iter_mut().zip(series.frame(t)) {
            *a += v;
        }
    }
    let inv = series.frames as f64;
    Volume {
        shape: series.shape,
        data: acc.into_iter().map(|a| a / inv).collect(),
        spacing: series.spacing,
        header: series.header.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// For intensity images.
    Trilinear,
    /// For label masks; never creates new values.
    Nearest,
}

/// Source coordinate of output sample `i` when resampling `n_in → n_out`
/// with voxel centres at `(i + 0.5)/n`: `(i + 0.5)·n_in/n_out − 0.5`.
fn source_coordinate(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// One output sample as a list of `(source index, weight)` taps.
fn taps(i: usize, n_in: usize, n_out: usize, mode: Interpolation) -> [(usize, f64); 2] {
    let x = source_coordinate(i, n_in, n_out);
    match mode {
        Interpolation::Nearest => {
            // floor(x + 0.5) = floor((i + 0.5)·n_in/n_out), clamped.
            let s = (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1);
            [(s, 1.0), (s, 0.0)]
        }
        Interpolation::Trilinear => {
            let x = x.clamp(0.0, (n_in - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = x - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        }
    }
}

/// Resamples along one axis of a C-order `[a, n, b]` block view.
fn resample_axis(data: &[f64], shape: [usize; 3], axis: usize, n_out: usize, mode: Interpolation) -> Vec<f64> {
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let table: Vec<[(usize, f64); 2]> = (0..n_out).map(|i| taps(i, n_in, n_out, mode)).collect();
    let mut out = Vec::with_capacity(outer * n_out * inner);
    for o in 0..outer {
        let block = &data[o * n_in * inner..(o + 1) * n_in * inner];
        for t in &table {
            let (r0, r1) = (&block[t[0].0 * inner..][..inner], &block[t[1].0 * inner..][..inner]);
            if t[1].1 == 0.0 {
                out.extend_from_slice(r0);
            } else {
                out.extend(r0.iter().zip(r1).map(|(a, b)| a * t[0].1 + b * t[1].1));
            }
        }
    }
    out
}

/// Resamples to `target` extents (separable linear or nearest-neighbour
/// interpolation with voxel centres at `(i + 0.5)/n`). Spacing scales so
/// the physical field of view is preserved.
pub fn resize(vol: &Volume, target: [usize; 3], mode: Interpolation) -> Result<Volume> {
    if target.contains(&0) || vol.shape.contains(&0) {
        return Err(Error::shape(format!("cannot resize {:?} to {target:?}", vol.shape)));
    }
    let mut shape = vol.shape;
    let mut data = vol.data.clone();
    for axis in 0..3 {
        if shape[axis] != target[axis] {
            data = resample_axis(&data, shape, axis, target[axis], mode);
            shape[axis] = target[axis];
        }
    }
    let spacing = [0, 1, 2].map(|a| vol.spacing[a] * vol.shape[a] as f64 / target[a] as f64);
    Ok(Volume {
        shape,
        data,
        spacing,
        header: vol.header.clone(),
    })
}

/// Min-max scaling to `[0, 1]`.
pub fn normalize(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a volume with range [{lo}, {hi}]"
        )));
    }
    if lo == 0.0 && hi == 1.0 {
        return Ok(vol.clone());
    }
    let span = hi - lo;
    Ok(vol.with_data(vol.data.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()))
}

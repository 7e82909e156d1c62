//! Seed-based functional connectivity: ROI mean time series, Pearson
//! correlation, Fisher z, and a one-sided one-sample t-test across subjects
//! per ROI pair; two pipelines are compared by a least-squares fit of their
//! t matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fisher_z, linear_fit, pearson, t_test_one_sample, Alternative, LinearFit};
use crate::post::Mask;
use crate::volio::{Series, Volume};

/// Integer ROI labelling; label `r` (1-based) is ROI `r − 1`, 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub shape: [usize; 3],
    pub labels: Vec<u32>,
    pub rois: usize,
}

impl Atlas {
    /// `rois` defaults to the largest label; every label `1..=rois` must occur.
    pub fn new(shape: [usize; 3], labels: Vec<u32>, rois: Option<usize>) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("atlas shape {shape:?} does not match {} labels", labels.len())));
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let rois = rois.unwrap_or(max);
        if rois == 0 {
            return Err(Error::Config("atlas has no ROI labels".into()));
        }
        if max > rois {
            return Err(Error::Config(format!("atlas label {max} exceeds the ROI count {rois}")));
        }
        let mut present = vec![false; rois];
        for &l in labels.iter().filter(|&&l| l > 0) {
            present[l as usize - 1] = true;
        }
        if let Some(r) = present.iter().position(|p| !p) {
            return Err(Error::Config(format!("atlas label {} does not occur", r + 1)));
        }
        Ok(Atlas { shape, labels, rois })
    }

    /// Reads labels from a volume of non-negative integers.
    pub fn from_volume(vol: &Volume, rois: Option<usize>) -> Result<Self> {
        let labels = vol
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::Config(format!("atlas value {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vol.shape, labels, rois)
    }

    /// Number of ROI pairs above the diagonal.
    pub fn pairs(&self) -> usize {
        self.rois * (self.rois - 1) / 2
    }
}

/// One subject: its 4-D series and the brain mask of the pipeline under study.
#[derive(Debug, Clone, Copy)]
pub struct FcSubject<'a> {
    pub series: &'a Series,
    pub mask: &'a Mask,
}

/// Mean time series of every ROI within `mask`; ROIs without voxels are `None`.
pub fn roi_time_series(series: &Series, mask: &Mask, atlas: &Atlas) -> Result<Vec<Option<Vec<f64>>>> {
    if series.shape != atlas.shape || mask.shape() != atlas.shape {
        return Err(Error::shape(format!(
            "series {:?}, mask {:?} and atlas {:?} must share a grid",
            series.shape,
            mask.shape(),
            atlas.shape
        )));
    }
    let mut voxels: Vec<Vec<usize>> = vec![Vec::new(); atlas.rois];
    for (v, (&l, &m)) in atlas.labels.iter().zip(mask.data()).enumerate() {
        if l > 0 && m {
            voxels[l as usize - 1].push(v);
        }
    }
    Ok(voxels
        .iter()
        .map(|vs| {
            (!vs.is_empty()).then(|| {
                (0..series.frames)
                    .map(|t| {
                        let frame = series.frame(t);
                        vs.iter().map(|&v| frame[v]).sum::<f64>() / vs.len() as f64
                    })
                    .collect()
            })
        })
        .collect())
}

/// Fisher-z connectivity matrix (row-major `R×R`) of one subject. Entries
/// are NaN on the diagonal, for empty ROIs and where the correlation is
/// undefined (constant series) or infinite (|r| = 1).
pub fn subject_connectivity(series: &Series, mask: &Mask, atlas: &Atlas) -> Result<(Vec<f64>, Vec<bool>)> {
    let ts = roi_time_series(series, mask, atlas)?;
    let r = atlas.rois;
    let mut z = vec![f64::NAN; r * r];
    for i in 0..r {
        for j in i + 1..r {
            let (Some(a), Some(b)) = (&ts[i], &ts[j]) else { continue };
            let value = match pearson(a, b).and_then(fisher_z) {
                Ok(v) => v,
                Err(Error::Degenerate(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            z[i * r + j] = value;
            z[j * r + i] = value;
        }
    }
    Ok((z, ts.iter().map(Option::is_none).collect()))
}

/// Group-level t statistics of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcGroup {
    pub rois: usize,
    pub subjects: usize,
    /// Symmetric row-major `R×R` t statistics; NaN where undefined.
    pub t: Vec<f64>,
    /// One-sided (positive connectivity) p-values, same layout.
    pub p: Vec<f64>,
    /// 1-based labels of ROIs without voxels in at least one subject.
    pub empty_rois: Vec<usize>,
}

impl FcGroup {
    pub fn t_at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.rois + j]
    }

    /// `t` above the diagonal, row by row (`R(R−1)/2` values).
    pub fn upper_triangle(&self) -> Vec<f64> {
        (0..self.rois)
            .flat_map(|i| (i + 1..self.rois).map(move |j| (i, j)))
            .map(|(i, j)| self.t_at(i, j))
            .collect()
    }
}

/// Per ROI pair: one-sided one-sample t-test (`H₁: mean z > 0`) of the
/// subjects' Fisher-z values. Pairs undefined in any subject stay NaN.
pub fn fc_group(subjects: &[FcSubject<'_>], atlas: &Atlas) -> Result<FcGroup> {
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "connectivity statistics need at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let r = atlas.rois;
    let mut per_subject = Vec::with_capacity(subjects.len());
    let mut empty = vec![false; r];
    for s in subjects {
        let (z, e) = subject_connectivity(s.series, s.mask, atlas)?;
        for (acc, flag) in empty.iter_mut().zip(e) {
            *acc |= flag;
        }
        per_subject.push(z);
    }
    let mut t = vec![f64::NAN; r * r];
    let mut p = vec![f64::NAN; r * r];
    for i in 0..r {
        for j in i + 1..r {
            let zs: Vec<f64> = per_subject.iter().map(|z| z[i * r + j]).collect();
            if zs.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let res = t_test_one_sample(&zs, 0.0, Alternative::Greater)?;
            for idx in [i * r + j, j * r + i] {
                t[idx] = res.statistic;
                p[idx] = res.p_value;
            }
        }
    }
    Ok(FcGroup {
        rois: r,
        subjects: subjects.len(),
        t,
        p,
        empty_rois: empty.iter().enumerate().filter(|(_, e)| **e).map(|(i, _)| i + 1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcResult {
    /// Reference pipeline.
    pub a: FcGroup,
    pub b: FcGroup,
    /// `t_b ≈ slope · t_a + intercept` over the upper-triangle pairs finite in both.
    pub comparison: LinearFit,
    /// Number of pairs entering the fit.
    pub informative: usize,
}

/// Runs both pipelines and compares their t matrices.
pub fn fc_analysis(group_a: &[FcSubject<'_>], group_b: &[FcSubject<'_>], atlas: &Atlas) -> Result<FcResult> {
    let a = fc_group(group_a, atlas)?;
    let b = fc_group(group_b, atlas)?;
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .upper_triangle()
        .into_iter()
        .zip(b.upper_triangle())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    let informative = x.len();
    let comparison = linear_fit(&x, &y)?;
    Ok(FcResult {
        a,
        b,
        comparison,
        informative,
    })
}

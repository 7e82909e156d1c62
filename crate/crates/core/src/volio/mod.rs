//! Volume input/output and preprocessing: NIfTI-1 files, temporal
//! averaging, resampling, intensity normalization, training augmentations,
//! Rician noise and the dataset manifest.
//!
//! Volumes are stored in C order with the first NIfTI axis slowest: the
//! value of file voxel `(i, j, k)` lives at `data[(i·nj + j)·nk + k]`, so a
//! volume of NIfTI dimensions `(128, 128, 64)` has shape `[128, 128, 64]`.

mod augment;
mod manifest;
mod nifti;
mod resample;

pub use augment::{
    augment, rician_noise, rician_noise_sigma, AugmentConfig, BlurAug, IntensityAug, GammaAug, LowResAug, NoiseAug,
};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, Split};
pub use nifti::{
    read_nifti, read_series, write_nifti, write_series, Datatype, NiftiHeader, WriteOptions, NIFTI_HEADER_SIZE,
};
pub use resample::{normalize, resize, temporal_mean, Interpolation};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A 3-D scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    /// Voxel size per axis (mm).
    pub spacing: [f64; 3],
    /// Header of the file the volume was read from, if any.
    pub header: Option<NiftiHeader>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            shape,
            data,
            spacing,
            header: None,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            data: vec![0.0; shape.iter().product()],
            spacing: [1.0; 3],
            header: None,
        }
    }

    /// Builds a volume from `f(i, j, k)` with unit spacing.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume {
            shape,
            data,
            spacing: [1.0; 3],
            header: None,
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            shape: self.shape,
            data,
            spacing: self.spacing,
            header: self.header.clone(),
        }
    }

    /// `[1, 1, D, H, W]` model input.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::new(&[1, 1, d, h, w], self.data.iter().map(|&v| T::from_f64_lossy(v)).collect())
            .expect("volume length matches its shape")
    }

    /// Reads a volume from a `[D, H, W]` or `[1, 1, D, H, W]` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        let s = t.shape();
        let shape = match s {
            [d, h, w] => [*d, *h, *w],
            [1, 1, d, h, w] => [*d, *h, *w],
            _ => return Err(Error::shape(format!("expected [D, H, W] or [1, 1, D, H, W], got {s:?}"))),
        };
        Volume::new(shape, t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(), spacing)
    }
}

/// A 4-D series: `frames` volumes of identical geometry, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub shape: [usize; 3],
    pub frames: usize,
    pub data: Vec<f64>,
    pub spacing: [f64; 3],
    /// Repetition time (seconds), from the fourth pixdim.
    pub repetition_time: f64,
    pub header: Option<NiftiHeader>,
}

impl Series {
    pub fn new(shape: [usize; 3], frames: Vec<Vec<f64>>, spacing: [f64; 3]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if frames.is_empty() {
            return Err(Error::shape("a series needs at least one frame"));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != n) {
            return Err(Error::shape(format!("frame of {} values does not match {shape:?}", f.len())));
        }
        Ok(Series {
            shape,
            frames: frames.len(),
            data: frames.concat(),
            spacing,
            repetition_time: 1.0,
            header: None,
        })
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[t * n..(t + 1) * n]
    }

    /// Time course of the voxel at linear index `v`.
    pub fn time_course(&self, v: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.data[t * self.voxels() + v]).collect()
    }
}

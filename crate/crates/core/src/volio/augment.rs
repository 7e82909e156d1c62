//! Seeded training augmentations and Rician noise injection.
//!
//! [`augment`] applies its enabled transforms in a fixed order — Gaussian
//! noise, Gaussian blur, brightness/contrast, simulated low resolution,
//! gamma — each with its own probability, then clamps to `[0, 1]`. All
//! randomness comes from `AugmentConfig::seed`, so a call is a pure
//! function of its inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{resize, Interpolation, Volume};
use crate::error::{Error, Result};

/// Additive Gaussian noise with σ drawn from `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseAug {
    pub enabled: bool,
    pub probability: f64,
    /// Within `[0, 0.5]`.
    pub sigma: [f64; 2],
}

impl Default for NoiseAug {
    fn default() -> Self {
        NoiseAug {
            enabled: true,
            probability: 0.15,
            sigma: [0.0, 0.05],
        }
    }
}

/// Separable Gaussian smoothing with σ (voxels) drawn from `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurAug {
    pub enabled: bool,
    pub probability: f64,
    /// Within `[0, 3]`.
    pub sigma: [f64; 2],
}

impl Default for BlurAug {
    fn default() -> Self {
        BlurAug {
            enabled: true,
            probability: 0.2,
            sigma: [0.5, 1.0],
        }
    }
}

/// `v·c + (1 − c)·mean + b` with contrast `c` and brightness `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityAug {
    pub enabled: bool,
    pub probability: f64,
    /// Additive shift, within `[-0.5, 0.5]`.
    pub brightness: [f64; 2],
    /// Multiplicative factor about the mean, within `[0.25, 4]`.
    pub contrast: [f64; 2],
}

impl Default for IntensityAug {
    fn default() -> Self {
        IntensityAug {
            enabled: true,
            probability: 0.15,
            brightness: [-0.1, 0.1],
            contrast: [0.75, 1.25],
        }
    }
}

/// Nearest-neighbour downsampling by `factor` then linear upsampling back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowResAug {
    pub enabled: bool,
    pub probability: f64,
    /// Scale of the intermediate grid, within `(0, 1]`.
    pub factor: [f64; 2],
}

impl Default for LowResAug {
    fn default() -> Self {
        LowResAug {
            enabled: true,
            probability: 0.25,
            factor: [0.5, 1.0],
        }
    }
}

/// `v^γ` with γ drawn from `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaAug {
    pub enabled: bool,
    pub probability: f64,
    /// Within `[0.2, 5]`.
    pub gamma: [f64; 2],
}

impl Default for GammaAug {
    fn default() -> Self {
        GammaAug {
            enabled: true,
            probability: 0.3,
            gamma: [0.7, 1.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub noise: NoiseAug,
    pub blur: BlurAug,
    pub intensity: IntensityAug,
    pub lowres: LowResAug,
    pub gamma: GammaAug,
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64, open_lo: bool) -> Result<()> {
    let above = |v: f64| if open_lo { v > lo } else { v >= lo };
    if !(r[0] <= r[1] && above(r[0]) && r[1] <= hi) {
        return Err(Error::Config(format!(
            "{name} range {r:?} must be ordered within {}{lo}, {hi}]",
            if open_lo { "(" } else { "[" }
        )));
    }
    Ok(())
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
    }
    Ok(())
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        let mut c = AugmentConfig::default();
        c.noise.enabled = false;
        c.blur.enabled = false;
        c.intensity.enabled = false;
        c.lowres.enabled = false;
        c.gamma.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("noise", self.noise.probability)?;
        check_range("noise sigma", self.noise.sigma, 0.0, 0.5, false)?;
        check_probability("blur", self.blur.probability)?;
        check_range("blur sigma", self.blur.sigma, 0.0, 3.0, false)?;
        check_probability("intensity", self.intensity.probability)?;
        check_range("brightness", self.intensity.brightness, -0.5, 0.5, false)?;
        check_range("contrast", self.intensity.contrast, 0.25, 4.0, false)?;
        check_probability("lowres", self.lowres.probability)?;
        check_range("lowres factor", self.lowres.factor, 0.0, 1.0, true)?;
        check_probability("gamma", self.gamma.probability)?;
        check_range("gamma", self.gamma.gamma, 0.2, 5.0, false)
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Whether a transform fires; always consumes one draw so that the random
/// stream of later transforms does not depend on earlier outcomes.
fn fires(rng: &mut ChaCha8Rng, enabled: bool, p: f64) -> bool {
    let u: f64 = rng.gen();
    enabled && u < p
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(vol: &Volume, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vol.data.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let shape = vol.shape;
    let mut data = vol.data.clone();
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..n {
                for (t, &w) in k.iter().enumerate() {
                    let s = (i + t as isize - r).clamp(0, n - 1) as usize;
                    let src = &data[(o * n as usize + s) * inner..][..inner];
                    let dst = &mut out[(o * n as usize + i as usize) * inner..][..inner];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
        }
        data = out;
    }
    data
}

/// Applies the enabled transforms; see the module documentation.
pub fn augment(vol: &Volume, cfg: &AugmentConfig) -> Result<Volume> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = vol.clone();

    if fires(&mut rng, cfg.noise.enabled, cfg.noise.probability) {
        let sigma = draw(&mut rng, cfg.noise.sigma);
        for x in &mut v.data {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += sigma * n;
        }
    }
    if fires(&mut rng, cfg.blur.enabled, cfg.blur.probability) {
        let sigma = draw(&mut rng, cfg.blur.sigma);
        v.data = blur(&v, sigma);
    }
    if fires(&mut rng, cfg.intensity.enabled, cfg.intensity.probability) {
        let b = draw(&mut rng, cfg.intensity.brightness);
        let c = draw(&mut rng, cfg.intensity.contrast);
        let mean = v.data.iter().sum::<f64>() / v.len().max(1) as f64;
        let shift = (1.0 - c) * mean + b;
        for x in &mut v.data {
            *x = *x * c + shift;
        }
    }
    if fires(&mut rng, cfg.lowres.enabled, cfg.lowres.probability) {
        let f = draw(&mut rng, cfg.lowres.factor);
        let small = v.shape.map(|e| ((e as f64 * f).round() as usize).max(1));
        let down = resize(&v, small, Interpolation::Nearest)?;
        let up = resize(&down, v.shape, Interpolation::Trilinear)?;
        v.data = up.data;
    }
    if fires(&mut rng, cfg.gamma.enabled, cfg.gamma.probability) {
        let g = draw(&mut rng, cfg.gamma.gamma);
        for x in &mut v.data {
            *x = x.max(0.0).powf(g);
        }
    }
    for x in &mut v.data {
        *x = x.clamp(0.0, 1.0);
    }
    Ok(v)
}

/// Rician noise with `σ = sigma_fraction × max intensity`.
pub fn rician_noise(vol: &Volume, sigma_fraction: f64, seed: u64) -> Result<Volume> {
    if !(sigma_fraction >= 0.0 && sigma_fraction.is_finite()) {
        return Err(Error::Config(format!("noise fraction must be >= 0, got {sigma_fraction}")));
    }
    let max = vol.data.iter().cloned().fold(0.0, f64::max);
    rician_noise_sigma(vol, sigma_fraction * max, seed)
}

/// Rician noise with absolute `σ`: `√((v + n₁)² + n₂²)`, `n₁, n₂ ~ N(0, σ²)`.
pub fn rician_noise_sigma(vol: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data
        .iter()
        .map(|&v| {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            (v + sigma * n1).hypot(sigma * n2)
        })
        .collect();
    Ok(vol.with_data(data))
}

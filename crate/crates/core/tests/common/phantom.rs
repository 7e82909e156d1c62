//! Seeded synthetic head phantoms: a textured ellipsoidal brain inside a
//! dark fluid gap and a bright ellipsoidal "skull" shell, on a dim
//! background. The brain ellipsoid is the ground-truth mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use sstdunet_core::post::Mask;
use sstdunet_core::volio::Volume;

pub struct Phantom {
    pub image: Volume,
    pub mask: Mask,
}

/// Normalized ellipsoid radius of the inner and outer skull surfaces.
const SKULL: [f64; 2] = [1.22, 1.45];

pub fn phantom(shape: [usize; 3], seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre: [f64; 3] = std::array::from_fn(|a| {
        let n = shape[a] as f64;
        n / 2.0 + rng.gen_range(-0.06..0.06) * n
    });
    let axes: [f64; 3] = std::array::from_fn(|a| shape[a] as f64 * rng.gen_range(0.26..0.32));
    let phases: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let brain = rng.gen_range(0.5..0.65);
    let skull = rng.gen_range(0.85..1.0);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");

    let radius = |i: usize, j: usize, k: usize| {
        let p = [i, j, k];
        (0..3)
            .map(|a| ((p[a] as f64 + 0.5 - centre[a]) / axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mask = Mask::from_fn(shape, |i, j, k| radius(i, j, k) <= 1.0);
    let image = Volume::from_fn(shape, |i, j, k| {
        let r = radius(i, j, k);
        let base = if r <= 1.0 {
            let p = [i as f64, j as f64, k as f64];
            let texture: f64 = (0..3).map(|a| (freq[a] * p[a] + phases[a]).sin()).sum::<f64>() / 3.0;
            brain + 0.08 * texture
        } else if r < SKULL[0] {
            0.15
        } else if r <= SKULL[1] {
            skull
        } else {
            0.05
        };
        base + noise.sample(&mut rng)
    });
    Phantom { image, mask }
}

/// `n` phantoms with seeds `seed, seed + 1, …`.
pub fn phantoms(shape: [usize; 3], n: usize, seed: u64) -> Vec<Phantom> {
    (0..n as u64).map(|i| phantom(shape, seed + i)).collect()
}

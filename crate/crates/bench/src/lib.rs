//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstdunet_core::post::Mask;
use sstdunet_core::Tensor;

/// `U(-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// A union of random balls: several components of varied size, like a
/// thresholded probability map before cleanup.
pub fn blob_mask(shape: [usize; 3], blobs: usize, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let balls: Vec<([f64; 3], f64)> = (0..blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.gen_range(0.0..shape[a] as f64));
            (c, rng.gen_range(1.0..shape[0] as f64 / 4.0))
        })
        .collect();
    Mask::from_fn(shape, |i, j, k| {
        balls.iter().any(|(c, r)| {
            let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
            d.iter().map(|x| x * x).sum::<f64>() <= r * r
        })
    })
}

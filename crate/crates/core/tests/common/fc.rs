//! Synthetic functional-connectivity fixtures.

use sstdunet_core::pipeline::Atlas;
use sstdunet_core::volio::Series;

/// Series on a `[R, 1, 2]` grid where ROI `r` occupies row `r`; the value of
/// ROI `r` at frame `t` is `signal(r, t) + noise`. With `planted`, ROIs 0
/// and 1 share a common signal.
pub fn fc_series(rois: usize, frames: usize, seed: u64, planted: bool) -> Series {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let common: Vec<f64> = (0..frames).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut frames_data = vec![vec![0.0; rois * 2]; frames];
    for r in 0..rois {
        for (t, f) in frames_data.iter_mut().enumerate() {
            for v in 0..2 {
                let n: f64 = StandardNormal.sample(&mut rng);
                f[r * 2 + v] = if planted && r < 2 { common[t] + 0.3 * n } else { n };
            }
        }
    }
    Series::new([rois, 1, 2], frames_data, [1.0; 3]).unwrap()
}

pub fn row_atlas(rois: usize) -> Atlas {
    Atlas::new([rois, 1, 2], (0..rois as u32).flat_map(|r| [r + 1, r + 1]).collect(), None).unwrap()
}

//! Independent brute-force oracles for masks: random fixtures, O(n²)
//! Hausdorff distance and flood-fill component extraction.

use rand::Rng;
use sstdunet_core::post::{Connectivity, Mask};

use super::rng;

/// Flood-fill labeling oracle: scans voxels in C order and grows each new
/// component depth-first over all neighbours within the connectivity.
pub fn flood_fill_largest(mask: &Mask, conn: Connectivity) -> Mask {
    let [d, h, w] = mask.shape();
    let mut seen = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let [z, y, x] = mask.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let m = dz.abs() + dy.abs() + dx.abs();
                        if m == 0 || (conn == Connectivity::Six && m != 1) {
                            continue;
                        }
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let j = mask.index(nz as usize, ny as usize, nx as usize);
                        if mask.data()[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        // Strictly larger only: earlier-starting components win ties.
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = Mask::empty(mask.shape());
    for i in best {
        let [z, y, x] = mask.coords(i);
        out.set(z, y, x, true);
    }
    out
}

pub fn random_mask(shape: [usize; 3], density: f64, seed: u64) -> Mask {
    let mut r = rng(seed);
    Mask::from_fn(shape, |_, _, _| r.gen_bool(density))
}

pub fn points(m: &Mask) -> Vec<[usize; 3]> {
    (0..m.len()).filter(|&i| m.data()[i]).map(|i| m.coords(i)).collect()
}

pub fn sq(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum()
}

/// O(|A|·|B|) Hausdorff distance.
pub fn brute_hausdorff(a: &Mask, b: &Mask, s: [f64; 3]) -> f64 {
    let (pa, pb) = (points(a), points(b));
    let directed = |x: &[[usize; 3]], y: &[[usize; 3]]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| sq(p, q, s)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa)).sqrt()
}

//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstdunet_core::tensor::ParamStore;
use sstdunet_core::{Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(r.gen_range(lo..hi)))
}

/// Overwrites every parameter with `U(-scale, scale)` noise.
pub fn randomize<T: Element>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = T::from_f64_lossy(r.gen_range(-scale..scale));
        }
    }
}

/// Overwrites parameters whose names contain `pattern` with `U(-scale, scale)`.
pub fn randomize_matching<T: Element>(store: &mut ParamStore<T>, pattern: &str, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (name, t) in store.iter_mut() {
        if name.contains(pattern) {
            for v in t.data_mut() {
                *v = T::from_f64_lossy(r.gen_range(-scale..scale));
            }
        }
    }
}

fn linear_row(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    (0..cout)
        .map(|j| b.data()[j] + (0..cin).map(|i| x[i] * w.data()[i * cout + j]).sum::<f64>())
        .collect()
}

/// Direct evaluation of shifted-window attention on `[1, C, D, H, W]`.
///
/// Query `p` attends to every `q` that falls in the same window after
/// rolling the volume by `-shift` and whose source coordinate lies on the
/// same side of the wrap-around seam on every axis — i.e. to the positions
/// that are spatially contiguous with it in the original volume.
pub fn brute_force_shifted_attention(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    prefix: &str,
    heads: usize,
    window: [usize; 3],
    shift: [usize; 3],
) -> Tensor<f64> {
    let s = x.shape();
    let (c, ext) = (s[1], [s[2], s[3], s[4]]);
    let n: usize = ext.iter().product();
    let d = c / heads;
    let token = |p: usize| -> Vec<f64> { (0..c).map(|ch| x.data()[ch * n + p]).collect() };
    let coords = |p: usize| [p / (ext[1] * ext[2]), (p / ext[2]) % ext[1], p % ext[2]];
    let get = |name: &str| store.get(&format!("{prefix}.{name}")).unwrap().clone();
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (
        get("q.weight"),
        get("q.bias"),
        get("k.weight"),
        get("k.bias"),
        get("v.weight"),
        get("v.bias"),
        get("out.weight"),
        get("out.bias"),
    );
    let q: Vec<Vec<f64>> = (0..n).map(|p| linear_row(&token(p), &wq, &bq)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|p| linear_row(&token(p), &wk, &bk)).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|p| linear_row(&token(p), &wv, &bv)).collect();
    let key = |p: usize| -> [(usize, bool); 3] {
        let cp = coords(p);
        [0, 1, 2].map(|a| {
            let rolled = (cp[a] + ext[a] - shift[a]) % ext[a];
            (rolled / window[a], cp[a] < shift[a])
        })
    };
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let kp = key(p);
        let keys: Vec<usize> = (0..n).filter(|&j| key(j) == kp).collect();
        let mut concat = vec![0.0; c];
        for h in 0..heads {
            let r = h * d..(h + 1) * d;
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    q[p][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&keys) {
                for i in r.clone() {
                    concat[i] += w / z * v[j][i];
                }
            }
        }
        let y = linear_row(&concat, &wo, &bo);
        for ch in 0..c {
            out[ch * n + p] = y[ch];
        }
    }
    Tensor::new(s, out).unwrap()
}

/// The shifted-window attention layer assembled from the public pieces:
/// roll by `-shift`, partition, masked MSA (validity + per-head `bias`),
/// reverse, roll back. With `bias == None` no mask is applied at all
/// (plain W-MSA).
pub fn shifted_msa(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    prefix: &str,
    heads: usize,
    window: [usize; 3],
    shift: [usize; 3],
    bias: Option<&Tensor<f64>>,
) -> Tensor<f64> {
    use sstdunet_core::attention::{
        build_validity_mask, cyclic_shift, cyclic_unshift, msa_forward, AttentionVars,
    };
    use sstdunet_core::Var;
    let s = x.shape();
    let spatial = [s[2], s[3], s[4]];
    let offsets = shift.map(|v| -(v as isize));
    let b = store.bind_frozen();
    let p = AttentionVars::from_bindings(&b, prefix, heads).unwrap();
    let rolled = cyclic_shift(&Var::constant(x.clone()), offsets).unwrap();
    let tokens = rolled.permute(&[0, 2, 3, 4, 1]).unwrap();
    let windows = partition(&tokens, window);
    let y = match bias {
        None => msa_forward(&windows, &p, None).unwrap(),
        Some(bias) => {
            let n: usize = window.iter().product();
            let nw = spatial[0] / window[0] * (spatial[1] / window[1]) * (spatial[2] / window[2]);
            let validity = build_validity_mask::<f64>(spatial, window, shift)
                .unwrap()
                .reshape(&[nw, 1, n, n])
                .unwrap();
            let mask = Var::constant(validity).add(&Var::constant(bias.clone())).unwrap();
            msa_forward(&windows, &p, Some(&mask)).unwrap()
        }
    };
    let back = unpartition(&y, window, s[0], spatial).permute(&[0, 4, 1, 2, 3]).unwrap();
    cyclic_unshift(&back, offsets).unwrap().value().clone()
}

fn partition(t: &sstdunet_core::Var<f64>, w: [usize; 3]) -> sstdunet_core::Var<f64> {
    let s = t.shape().to_vec();
    let (nz, ny, nx) = (s[1] / w[0], s[2] / w[1], s[3] / w[2]);
    t.reshape(&[s[0], nz, w[0], ny, w[1], nx, w[2], s[4]])
        .unwrap()
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])
        .unwrap()
        .reshape(&[s[0] * nz * ny * nx, w[0] * w[1] * w[2], s[4]])
        .unwrap()
}

fn unpartition(
    t: &sstdunet_core::Var<f64>,
    w: [usize; 3],
    batch: usize,
    spatial: [usize; 3],
) -> sstdunet_core::Var<f64> {
    let c = t.shape()[2];
    let (nz, ny, nx) = (spatial[0] / w[0], spatial[1] / w[1], spatial[2] / w[2]);
    t.reshape(&[batch, nz, ny, nx, w[0], w[1], w[2], c])
        .unwrap()
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])
        .unwrap()
        .reshape(&[batch, spatial[0], spatial[1], spatial[2], c])
        .unwrap()
}

pub mod fc;
pub mod oracles;
pub mod phantom;

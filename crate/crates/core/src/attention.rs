//! 3-D window attention: partitioning, cyclic shifts, shift-validity masks,
//! multi-head self-attention with an additive learnable per-head mask, and
//! the two-step transformer block.
//!
//! Window order is z-major over the window grid; positions inside a window
//! are z-major as well. The public partition helpers take channel-first
//! volumes `[B, C, D, H, W]`; the block internally works on channel-last
//! token grids `[B, D, H, W, C]` so that layer norms and projections act on
//! the trailing axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, WeightInit};
use crate::tensor::{Bindings, Element, ParamInit, ParamStore, Tensor, Var};

/// Window attention settings of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window extent `M` per axis.
    pub window_size: usize,
    /// Cyclic shift of the shifted-window layer (`M / 2` by default).
    pub shift: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl WindowConfig {
    pub fn new(window_size: usize, num_heads: usize, head_dim: usize) -> Self {
        WindowConfig {
            window_size,
            shift: window_size / 2,
            num_heads,
            head_dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Per-axis window and shift for a feature map of extent `spatial`.
    ///
    /// An axis no longer than the window is covered by a single window of
    /// its own extent and is never shifted; longer axes must be divisible by
    /// the window size.
    pub fn resolve(&self, spatial: [usize; 3]) -> Result<WindowGeometry> {
        if self.window_size == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!("degenerate window config {self:?}")));
        }
        if self.shift >= self.window_size {
            return Err(Error::Config(format!(
                "shift {} must be smaller than window size {}",
                self.shift, self.window_size
            )));
        }
        let mut window = [0; 3];
        let mut shift = [0; 3];
        for a in 0..3 {
            let e = spatial[a];
            if e == 0 {
                return Err(Error::shape(format!("zero extent in {spatial:?}")));
            }
            if e <= self.window_size {
                window[a] = e;
            } else if e % self.window_size == 0 {
                window[a] = self.window_size;
                shift[a] = self.shift;
            } else {
                return Err(Error::shape(format!(
                    "extent {e} (of {spatial:?}) not divisible by window size {}",
                    self.window_size
                )));
            }
        }
        Ok(WindowGeometry {
            spatial,
            window,
            shift,
        })
    }
}

/// Resolved window layout of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub spatial: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowGeometry {
    pub fn grid(&self) -> [usize; 3] {
        [
            self.spatial[0] / self.window[0],
            self.spatial[1] / self.window[1],
            self.spatial[2] / self.window[2],
        ]
    }

    pub fn num_windows(&self) -> usize {
        self.grid().iter().product()
    }

    /// Positions per window (`M³` for cubic windows).
    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    /// Offsets of the cyclic shift applied before shifted-window attention.
    pub fn shift_offsets(&self) -> [isize; 3] {
        self.shift.map(|s| -(s as isize))
    }
}

fn check_window(spatial: &[usize], window: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if window[a] == 0 || spatial[a] % window[a] != 0 {
            return Err(Error::shape(format!(
                "spatial extents {spatial:?} not divisible by window {window:?}"
            )));
        }
    }
    Ok(())
}

/// `[B, D, H, W, C]` → `[B·nW, N, C]`.
pub(crate) fn partition_tokens<T: Element>(x: &Var<T>, window: [usize; 3]) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("expected [B, D, H, W, C], got {s:?}")));
    }
    check_window(&s[1..4], window)?;
    let [wz, wy, wx] = window;
    let (b, c) = (s[0], s[4]);
    let (nz, ny, nx) = (s[1] / wz, s[2] / wy, s[3] / wx);
    x.reshape(&[b, nz, wz, ny, wy, nx, wx, c])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[b * nz * ny * nx, wz * wy * wx, c])
}

/// `[B·nW, N, C]` → `[B, D, H, W, C]`.
pub(crate) fn reverse_tokens<T: Element>(
    windows: &Var<T>,
    window: [usize; 3],
    batch: usize,
    spatial: [usize; 3],
) -> Result<Var<T>> {
    check_window(&spatial, window)?;
    let [wz, wy, wx] = window;
    let (nz, ny, nx) = (spatial[0] / wz, spatial[1] / wy, spatial[2] / wx);
    let s = windows.shape();
    if s.len() != 3 || s[0] != batch * nz * ny * nx || s[1] != wz * wy * wx {
        return Err(Error::shape(format!(
            "windows {s:?} do not tile batch {batch} of {spatial:?} with window {window:?}"
        )));
    }
    let c = s[2];
    windows
        .reshape(&[batch, nz, ny, nx, wz, wy, wx, c])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&[batch, spatial[0], spatial[1], spatial[2], c])
}

/// `[B, C, D, H, W]` → `[B·nW, N, C]` with cubic window `M`.
pub fn window_partition<T: Element>(x: &Var<T>, m: usize) -> Result<Var<T>> {
    if x.ndim() != 5 {
        return Err(Error::shape(format!("expected [B, C, D, H, W], got {:?}", x.shape())));
    }
    partition_tokens(&x.permute(&[0, 2, 3, 4, 1])?, [m; 3])
}

/// Inverse of [`window_partition`]: `[B·nW, N, C]` → `[B, C, D, H, W]`.
pub fn window_reverse<T: Element>(
    windows: &Var<T>,
    m: usize,
    batch: usize,
    spatial: [usize; 3],
) -> Result<Var<T>> {
    reverse_tokens(windows, [m; 3], batch, spatial)?.permute(&[0, 4, 1, 2, 3])
}

fn spatial_roll<T: Element>(x: &Var<T>, offsets: [isize; 3], channel_last: bool) -> Result<Var<T>> {
    if x.ndim() != 5 {
        return Err(Error::shape(format!("expected a 5-D volume, got {:?}", x.shape())));
    }
    if offsets == [0; 3] {
        return Ok(x.clone());
    }
    let shifts = if channel_last {
        [0, offsets[0], offsets[1], offsets[2], 0]
    } else {
        [0, 0, offsets[0], offsets[1], offsets[2]]
    };
    x.roll(&shifts)
}

/// Toroidal roll of the spatial axes of `[B, C, D, H, W]`:
/// `out[(i + o) mod n] = x[i]` per axis.
pub fn cyclic_shift<T: Element>(x: &Var<T>, offsets: [isize; 3]) -> Result<Var<T>> {
    spatial_roll(x, offsets, false)
}

/// Inverse of [`cyclic_shift`] with the same offsets.
pub fn cyclic_unshift<T: Element>(x: &Var<T>, offsets: [isize; 3]) -> Result<Var<T>> {
    spatial_roll(x, offsets.map(|o| -o), false)
}

/// Shift-validity mask `[nW, N, N]` with entries in `{0, −∞}`.
///
/// In the rolled frame each axis splits into the unshifted bulk, the tail of
/// the original volume and the wrapped-around head; positions may attend to
/// each other only when they belong to the same region on every axis.
pub fn build_validity_mask<T: Element>(
    spatial: [usize; 3],
    window: [usize; 3],
    shift: [usize; 3],
) -> Result<Tensor<T>> {
    check_window(&spatial, window)?;
    for a in 0..3 {
        if shift[a] >= window[a] && shift[a] != 0 {
            return Err(Error::shape(format!(
                "shift {shift:?} must be smaller than window {window:?}"
            )));
        }
    }
    let region = |a: usize, c: usize| -> usize {
        let (e, w, s) = (spatial[a], window[a], shift[a]);
        if s == 0 || c < e - w {
            0
        } else if c < e - s {
            1
        } else {
            2
        }
    };
    let grid = [spatial[0] / window[0], spatial[1] / window[1], spatial[2] / window[2]];
    let n: usize = window.iter().product();
    let nw: usize = grid.iter().product();
    let mut labels = vec![0usize; n];
    let mut data = Vec::with_capacity(nw * n * n);
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                let mut k = 0;
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        for x in 0..window[2] {
                            labels[k] = region(0, gz * window[0] + z) * 9
                                + region(1, gy * window[1] + y) * 3
                                + region(2, gx * window[2] + x);
                            k += 1;
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        data.push(if labels[i] == labels[j] {
                            T::zero()
                        } else {
                            T::neg_infinity()
                        });
                    }
                }
            }
        }
    }
    Tensor::new(&[nw, n, n], data)
}

/// Affine projection `x·W + b` on the last axis.
#[derive(Clone)]
pub struct Projection<T: Element> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Element> Projection<T> {
    pub fn from_bindings(b: &Bindings<T>, prefix: &str) -> Result<Self> {
        Ok(Projection {
            weight: b.get(&format!("{prefix}.weight"))?.clone(),
            bias: b.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    pub fn apply(&self, x: &Var<T>) -> Result<Var<T>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Projections of one attention layer.
#[derive(Clone)]
pub struct AttentionVars<T: Element> {
    pub query: Projection<T>,
    pub key: Projection<T>,
    pub value: Projection<T>,
    pub output: Projection<T>,
    pub num_heads: usize,
}

impl<T: Element> AttentionVars<T> {
    pub fn from_bindings(b: &Bindings<T>, prefix: &str, num_heads: usize) -> Result<Self> {
        Ok(AttentionVars {
            query: Projection::from_bindings(b, &format!("{prefix}.q"))?,
            key: Projection::from_bindings(b, &format!("{prefix}.k"))?,
            value: Projection::from_bindings(b, &format!("{prefix}.v"))?,
            output: Projection::from_bindings(b, &format!("{prefix}.out"))?,
            num_heads,
        })
    }
}

/// Registers Q/K/V/output projections `C → C`; the output projection (the
/// residual branch's last layer) starts at zero.
pub fn register_attention<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    for (name, w) in [
        ("q", WeightInit::FanIn),
        ("k", WeightInit::FanIn),
        ("v", WeightInit::FanIn),
        ("out", WeightInit::Zero),
    ] {
        layers::register_linear(store, init, &format!("{prefix}.{name}"), channels, channels, true, w)?;
    }
    Ok(())
}

/// `[Bw, N, C]` → `[Bw, h, N, d]`.
fn split_heads<T: Element>(x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let s = x.shape();
    let (bw, n, c) = (s[0], s[1], s[2]);
    x.reshape(&[bw, n, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// Attention weights `[Bw, h, N, N]`:
/// `softmax(Q·Kᵀ/√d + mask)` over keys.
///
/// `mask` is either `[h | 1, N, N]` (shared by every window) or
/// `[nWm, h | 1, N, N]`, in which case window `i` uses mask `i mod nWm`
/// (windows are batch-major, so `nWm` is the per-sample window count).
pub fn attention_weights<T: Element>(
    x: &Var<T>,
    p: &AttentionVars<T>,
    mask: Option<&Var<T>>,
) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected windows [Bw, N, C], got {s:?}")));
    }
    let (bw, n, c) = (s[0], s[1], s[2]);
    let h = p.num_heads;
    if h == 0 || c % h != 0 {
        return Err(Error::shape(format!("{c} channels cannot be split into {h} heads")));
    }
    let d = c / h;
    let q = split_heads(&p.query.apply(x)?, h)?;
    let k = split_heads(&p.key.apply(x)?, h)?;
    let scores = q
        .matmul(&k.transpose_last()?)?
        .mul_scalar(1.0 / (d as f64).sqrt());
    let scores = match mask {
        None => scores,
        Some(m) => {
            let ms = m.shape();
            let heads_ok = |mh: usize| mh == h || mh == 1;
            match ms.len() {
                3 if heads_ok(ms[0]) && ms[1] == n && ms[2] == n => scores.add(m)?,
                4 if heads_ok(ms[1]) && ms[2] == n && ms[3] == n && ms[0] > 0 && bw % ms[0] == 0 => {
                    scores
                        .reshape(&[bw / ms[0], ms[0], h, n, n])?
                        .add(m)?
                        .reshape(&[bw, h, n, n])?
                }
                _ => {
                    return Err(Error::shape(format!(
                        "mask {ms:?} incompatible with {bw} windows, {h} heads, {n} tokens"
                    )))
                }
            }
        }
    };
    scores.softmax(3)
}

/// Multi-head self-attention over windows `[Bw, N, C]` → `[Bw, N, C]`.
pub fn msa_forward<T: Element>(
    x: &Var<T>,
    p: &AttentionVars<T>,
    mask: Option<&Var<T>>,
) -> Result<Var<T>> {
    let attn = attention_weights(x, p, mask)?;
    let s = x.shape();
    let (bw, n, c) = (s[0], s[1], s[2]);
    let v = split_heads(&p.value.apply(x)?, p.num_heads)?;
    let heads = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[bw, n, c])?;
    p.output.apply(&heads)
}

/// One two-step transformer block: windowed attention and MLP, then
/// shifted-window attention under the smart mask and a second MLP, each
/// step pre-normalised and residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub prefix: String,
    pub channels: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub geometry: WindowGeometry,
}

impl SwinBlock {
    pub fn new(prefix: impl Into<String>, cfg: &WindowConfig, spatial: [usize; 3], mlp_ratio: usize) -> Result<Self> {
        let channels = cfg.channels();
        Ok(SwinBlock {
            prefix: prefix.into(),
            channels,
            num_heads: cfg.num_heads,
            mlp_hidden: channels * mlp_ratio.max(1),
            geometry: cfg.resolve(spatial)?,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Name of the learnable smart-mask bias `[h, N, N]`.
    pub fn smart_mask_name(&self) -> String {
        self.name("smart_mask")
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, init: &mut ParamInit) -> Result<()> {
        let c = self.channels;
        let n = self.geometry.tokens();
        for (step, attn) in [(1, "attn_w"), (3, "attn_s")] {
            layers::register_norm(store, &self.name(&format!("norm{step}")), c)?;
            register_attention(store, init, &self.name(attn), c)?;
            layers::register_norm(store, &self.name(&format!("norm{}", step + 1)), c)?;
            let mlp = self.name(&format!("mlp{}", step / 2 + 1));
            layers::register_linear(store, init, &format!("{mlp}.fc1"), c, self.mlp_hidden, true, WeightInit::FanIn)?;
            layers::register_linear(store, init, &format!("{mlp}.fc2"), self.mlp_hidden, c, true, WeightInit::Zero)?;
        }
        store.insert(self.smart_mask_name(), Tensor::zeros(&[self.num_heads, n, n]))
    }

    /// Effective mask of the shifted layer: validity `[nW, 1, N, N]` plus the
    /// per-head bias `[h, N, N]`.
    pub fn effective_mask<T: Element>(&self, b: &Bindings<T>) -> Result<Var<T>> {
        let g = &self.geometry;
        let n = g.tokens();
        let validity = build_validity_mask::<T>(g.spatial, g.window, g.shift)?
            .reshape(&[g.num_windows(), 1, n, n])?;
        Var::constant(validity).add(b.get(&self.smart_mask_name())?)
    }

    fn mlp<T: Element>(&self, b: &Bindings<T>, idx: usize, x: &Var<T>) -> Result<Var<T>> {
        let prefix = self.name(&format!("mlp{idx}"));
        let h = layers::linear(b, &format!("{prefix}.fc1"), x)?.gelu();
        layers::linear(b, &format!("{prefix}.fc2"), &h)
    }

    fn windowed<T: Element>(
        &self,
        b: &Bindings<T>,
        attn: &str,
        x: &Var<T>,
        mask: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let g = &self.geometry;
        let batch = x.shape()[0];
        let p = AttentionVars::from_bindings(b, &self.name(attn), self.num_heads)?;
        let w = partition_tokens(x, g.window)?;
        let y = msa_forward(&w, &p, mask)?;
        reverse_tokens(&y, g.window, batch, g.spatial)
    }

    /// Forward on channel-last tokens `[B, D, H, W, C]`.
    pub fn forward_tokens<T: Element>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1..4] != self.geometry.spatial || s[4] != self.channels {
            return Err(Error::shape(format!(
                "block {} expects [B, {:?}, {}], got {s:?}",
                self.prefix, self.geometry.spatial, self.channels
            )));
        }
        let x = x.add(&self.windowed(b, "attn_w", &layers::norm(b, &self.name("norm1"), x)?, None)?)?;
        let x = x.add(&self.mlp(b, 1, &layers::norm(b, &self.name("norm2"), &x)?)?)?;

        let offsets = self.geometry.shift_offsets();
        let shifted = spatial_roll(&layers::norm(b, &self.name("norm3"), &x)?, offsets, true)?;
        let mask = self.effective_mask(b)?;
        let attended = self.windowed(b, "attn_s", &shifted, Some(&mask))?;
        let x = x.add(&spatial_roll(&attended, offsets.map(|o| -o), true)?)?;

        x.add(&self.mlp(b, 2, &layers::norm(b, &self.name("norm4"), &x)?)?)
    }

    /// Forward on channel-first volumes `[B, C, D, H, W]`.
    pub fn forward<T: Element>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.ndim() != 5 {
            return Err(Error::shape(format!("expected [B, C, D, H, W], got {:?}", x.shape())));
        }
        let tokens = x.permute(&[0, 2, 3, 4, 1])?;
        self.forward_tokens(b, &tokens)?.permute(&[0, 4, 1, 2, 3])
    }
}

/// Functional form of [`SwinBlock::forward`].
pub fn swin_block_forward<T: Element>(block: &SwinBlock, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
    block.forward(b, x)
}

//! Transformer feature extractor: a stride-2 convolutional patch embedding,
//! three attention stages and three patch mergings, producing four feature
//! scales `F₁..F₄` with channels `C₀, 2C₀, 4C₀, 8C₀` at `1/2 .. 1/16` of the
//! input resolution.

use serde::{Deserialize, Serialize};

use crate::attention::{SwinBlock, WindowConfig};
use crate::error::{Error, Result};
use crate::layers::{self, WeightInit};
use crate::tensor::{Bindings, ConvGeometry, Element, ParamInit, ParamStore, Var};

/// Number of attention stages (and of patch mergings).
pub const NUM_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// `C₀`, the channel count of the first scale.
    pub base_channels: usize,
    /// Two-step attention blocks per stage.
    pub depths: [usize; NUM_STAGES],
    pub window_size: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            base_channels: 48,
            depths: [1; NUM_STAGES],
            window_size: 4,
            head_dim: 16,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Channel count of scale `s` (1-based): `C₀·2^(s−1)`.
    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << (scale - 1)
    }

    /// Attention settings of stage `s` (1-based).
    pub fn window(&self, stage: usize) -> Result<WindowConfig> {
        let c = self.channels(stage);
        if self.head_dim == 0 || c % self.head_dim != 0 {
            return Err(Error::Config(format!(
                "stage {stage} width {c} is not a multiple of head_dim {}",
                self.head_dim
            )));
        }
        Ok(WindowConfig::new(self.window_size, c / self.head_dim, self.head_dim))
    }
}

/// Halves the spatial extents of `[B, D, H, W, C]` by concatenating each
/// 2×2×2 neighbourhood into `[B, D/2, H/2, W/2, 8C]`. Neighbours are
/// concatenated with z as the slowest offset, then y, then x.
pub fn merge_neighbourhood<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("expected [B, D, H, W, C], got {s:?}")));
    }
    if s[1..4].iter().any(|e| e % 2 != 0) {
        return Err(Error::shape(format!("patch merging needs even extents, got {s:?}")));
    }
    let (b, c) = (s[0], s[4]);
    let (d, h, w) = (s[1] / 2, s[2] / 2, s[3] / 2);
    x.reshape(&[b, d, 2, h, 2, w, 2, c])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[b, d, h, w, 8 * c])
}

/// Patch embedding `[B, Cin, D, H, W]` → channel-last `[B, D/2, H/2, W/2, C₀]`.
pub(crate) fn embed_tokens<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 5 || s[2..].iter().any(|e| e % 2 != 0) {
        return Err(Error::shape(format!(
            "patch embedding needs [B, C, D, H, W] with even extents, got {s:?}"
        )));
    }
    let y = layers::conv(b, &format!("{prefix}.proj"), x, ConvGeometry::cube(2, 2, 0))?;
    layers::norm(b, &format!("{prefix}.norm"), &y.permute(&[0, 2, 3, 4, 1])?)
}

/// Patch merging on tokens: neighbourhood concatenation, linear `8C → 2C`
/// (no bias), layer norm.
pub(crate) fn merge_tokens<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let y = layers::linear(b, &format!("{prefix}.reduction"), &merge_neighbourhood(x)?)?;
    layers::norm(b, &format!("{prefix}.norm"), &y)
}

fn to_channel_first<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 4, 1, 2, 3])
}

fn to_channel_last<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 2, 3, 4, 1])
}

/// `[B, Cin, D, H, W]` → `[B, C₀, D/2, H/2, W/2]` with the parameters
/// registered under `prefix` (see [`Encoder::register`]).
pub fn patch_embed<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    to_channel_first(&embed_tokens(b, prefix, x)?)
}

/// `[B, C, D, H, W]` → `[B, 2C, D/2, H/2, W/2]`.
pub fn patch_merge<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    if x.ndim() != 5 {
        return Err(Error::shape(format!("expected [B, C, D, H, W], got {:?}", x.shape())));
    }
    to_channel_first(&merge_tokens(b, prefix, &to_channel_last(x)?)?)
}

/// Registers patch-merge parameters for input width `c`.
pub fn register_patch_merge<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    c: usize,
) -> Result<()> {
    layers::register_linear(store, init, &format!("{prefix}.reduction"), 8 * c, 2 * c, false, WeightInit::FanIn)?;
    layers::register_norm(store, &format!("{prefix}.norm"), 2 * c)
}

/// Registers patch-embedding parameters.
pub fn register_patch_embed<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    cin: usize,
    c0: usize,
) -> Result<()> {
    layers::register_conv(store, init, &format!("{prefix}.proj"), cin, c0, [2; 3])?;
    layers::register_norm(store, &format!("{prefix}.norm"), c0)
}

/// The encoder laid out for one input size.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub prefix: String,
    pub config: EncoderConfig,
    pub input: [usize; 3],
    /// Attention blocks of stages 1..=3.
    pub stages: Vec<Vec<SwinBlock>>,
}

impl Encoder {
    pub fn new(prefix: impl Into<String>, config: EncoderConfig, input: [usize; 3]) -> Result<Self> {
        let prefix = prefix.into();
        if input.iter().any(|e| e % (1 << (NUM_STAGES + 1)) != 0) {
            return Err(Error::shape(format!(
                "encoder input {input:?} must be divisible by {}",
                1 << (NUM_STAGES + 1)
            )));
        }
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let spatial = input.map(|e| e >> s);
            let wc = config.window(s)?;
            let blocks = (0..config.depths[s - 1])
                .map(|i| SwinBlock::new(format!("{prefix}.stage{s}.block{i}"), &wc, spatial, config.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Encoder {
            prefix,
            config,
            input,
            stages,
        })
    }

    fn embed_prefix(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    fn merge_prefix(&self, s: usize) -> String {
        format!("{}.merge{s}", self.prefix)
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, init: &mut ParamInit) -> Result<()> {
        let cfg = &self.config;
        register_patch_embed(store, init, &self.embed_prefix(), cfg.in_channels, cfg.base_channels)?;
        for s in 1..=NUM_STAGES {
            for block in &self.stages[s - 1] {
                block.register(store, init)?;
            }
            register_patch_merge(store, init, &self.merge_prefix(s), cfg.channels(s))?;
        }
        Ok(())
    }

    /// Feature shapes `[C, D, H, W]` of `F₁..F₄`.
    pub fn feature_shapes(&self) -> Vec<[usize; 4]> {
        (1..=NUM_STAGES + 1)
            .map(|s| {
                let [d, h, w] = self.input.map(|e| e >> s);
                [self.config.channels(s), d, h, w]
            })
            .collect()
    }

    /// `[B, Cin, D, H, W]` → `[F₁, F₂, F₃, F₄]`, each channel-first.
    pub fn forward<T: Element>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels || s[2..] != self.input {
            return Err(Error::shape(format!(
                "encoder expects [B, {}, {:?}], got {s:?}",
                self.config.in_channels, self.input
            )));
        }
        let mut t = embed_tokens(b, &self.embed_prefix(), x)?;
        let mut features = Vec::with_capacity(NUM_STAGES + 1);
        for s in 1..=NUM_STAGES {
            for block in &self.stages[s - 1] {
                t = block.forward_tokens(b, &t)?;
            }
            features.push(to_channel_first(&t)?);
            t = merge_tokens(b, &self.merge_prefix(s), &t)?;
        }
        features.push(to_channel_first(&t)?);
        Ok(features)
    }
}

/// Functional form of [`Encoder::forward`].
pub fn encoder_forward<T: Element>(encoder: &Encoder, b: &Bindings<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
    encoder.forward(b, x)
}

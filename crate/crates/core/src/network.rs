//! The full segmentation network: a dense/residual 3-D UNet with five
//! down-sampling blocks, a bridge and five up-sampling blocks, fused with the
//! four transformer feature scales, ending in a sigmoid mask head.
//!
//! Decoder level `l` runs at `1/2^l` of the input. The transformer scale
//! `F_s` (at `1/2^s`) is projected by a 1×1×1 convolution and concatenated
//! into the up-block whose output lies at level `s`; the bridge (level 5)
//! and the full-resolution up-block use CNN skips only.
//!
//! Pooling saturates per axis: an axis whose extent at some level is odd is
//! not pooled further (and its transposed convolution uses factor 1).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers;
use crate::tensor::{
    concat, Bindings, ConvGeometry, DType, Element, ParamInit, ParamStore, Tensor, Var,
    LEAKY_RELU_SLOPE,
};

/// Number of down-sampling (and up-sampling) blocks.
pub const DEPTH: usize = 5;

/// Lowest and highest probability the head emits.
pub const OUTPUT_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input extents `[D, H, W]`.
    pub input_size: [usize; 3],
    pub encoder: EncoderConfig,
    /// Width of the full-resolution CNN level.
    pub cnn_base: usize,
    /// Level widths are `cnn_base · min(2^l, cnn_max_mult)`.
    pub cnn_max_mult: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [128, 128, 64],
            encoder: EncoderConfig::default(),
            cnn_base: 16,
            cnn_max_mult: 8,
            leaky_slope: LEAKY_RELU_SLOPE,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile: 32×32×16 input, `C₀ = 8`, `M = 4`, `d = 8`.
    pub fn test_scale() -> Self {
        ModelConfig {
            input_size: [32, 32, 16],
            encoder: EncoderConfig {
                base_channels: 8,
                head_dim: 8,
                ..EncoderConfig::default()
            },
            cnn_base: 8,
            ..ModelConfig::default()
        }
    }

    /// Smallest consistent profile, for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: [16, 16, 16],
            encoder: EncoderConfig {
                base_channels: 4,
                head_dim: 4,
                mlp_ratio: 2,
                ..EncoderConfig::default()
            },
            cnn_base: 2,
            cnn_max_mult: 2,
            ..ModelConfig::default()
        }
    }

    /// CNN width at level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.cnn_base * (1usize << level).min(self.cnn_max_mult.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_base == 0 || self.encoder.base_channels == 0 || self.encoder.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// A dense block: `h1 = act(conv1(x))`, `h2 = act(conv2([x, h1]))`,
/// `out = h2 + shortcut(x)`.
#[derive(Debug, Clone)]
struct DenseBlock {
    prefix: String,
    cin: usize,
    width: usize,
}

impl DenseBlock {
    fn register<T: Element>(&self, store: &mut ParamStore<T>, init: &mut ParamInit) -> Result<()> {
        let p = &self.prefix;
        layers::register_conv(store, init, &format!("{p}.conv1"), self.cin, self.width, [3; 3])?;
        layers::register_conv(store, init, &format!("{p}.conv2"), self.cin + self.width, self.width, [3; 3])?;
        if self.cin != self.width {
            layers::register_conv(store, init, &format!("{p}.shortcut"), self.cin, self.width, [1; 3])?;
        }
        Ok(())
    }

    fn forward<T: Element>(&self, b: &Bindings<T>, x: &Var<T>, slope: f64) -> Result<Var<T>> {
        let p = &self.prefix;
        let h1 = layers::conv(b, &format!("{p}.conv1"), x, ConvGeometry::same3())?.leaky_relu(slope);
        let h2 = layers::conv(b, &format!("{p}.conv2"), &concat(&[x.clone(), h1], 1)?, ConvGeometry::same3())?
            .leaky_relu(slope);
        let shortcut = if self.cin != self.width {
            layers::conv(b, &format!("{p}.shortcut"), x, ConvGeometry::pointwise())?
        } else {
            x.clone()
        };
        h2.add(&shortcut)
    }
}

/// One row of [`SstDUNet::shape_trace`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub stage: String,
    /// `[C, D, H, W]`.
    pub shape: [usize; 4],
}

/// The network laid out for one configuration.
#[derive(Debug, Clone)]
pub struct SstDUNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Spatial extents of levels `0..=DEPTH`.
    pub levels: Vec<[usize; 3]>,
    /// Pooling factor from level `l` to `l + 1`.
    pub factors: Vec<[usize; 3]>,
    down: Vec<DenseBlock>,
    bridge: DenseBlock,
    /// Up-blocks indexed by output level `0..DEPTH`.
    up: Vec<DenseBlock>,
}

impl SstDUNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new("encoder", config.encoder.clone(), config.input_size)?;
        let mut levels = vec![config.input_size];
        let mut factors = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            let ext = levels[l];
            let f = ext.map(|e| if e % 2 == 0 { 2 } else { 1 });
            factors.push(f);
            levels.push([ext[0] / f[0], ext[1] / f[1], ext[2] / f[2]]);
        }
        let w = |l: usize| config.width(l);
        let down = (0..DEPTH)
            .map(|l| DenseBlock {
                prefix: format!("down{l}"),
                cin: if l == 0 { w(0) } else { w(l - 1) },
                width: w(l),
            })
            .collect();
        let bridge = DenseBlock {
            prefix: "bridge".into(),
            cin: w(DEPTH - 1),
            width: w(DEPTH),
        };
        let up = (0..DEPTH)
            .map(|l| {
                let fused = if Self::fuses(l) { w(l) } else { 0 };
                DenseBlock {
                    prefix: format!("up{l}"),
                    cin: 2 * w(l) + fused,
                    width: w(l),
                }
            })
            .collect();
        let net = SstDUNet {
            config,
            encoder,
            levels,
            factors,
            down,
            bridge,
            up,
        };
        // Every transformer scale must land on its decoder level.
        for (s, shape) in net.encoder.feature_shapes().iter().enumerate() {
            let level = s + 1;
            if shape[1..] != net.levels[level] {
                return Err(Error::shape(format!(
                    "transformer scale {level} has extent {:?} but decoder level {level} has {:?}",
                    &shape[1..],
                    net.levels[level]
                )));
            }
        }
        Ok(net)
    }

    /// Whether the up-block with output level `l` receives a transformer scale.
    fn fuses(level: usize) -> bool {
        (1..DEPTH).contains(&level)
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, init: &mut ParamInit) -> Result<()> {
        let w = |l: usize| self.config.width(l);
        self.encoder.register(store, init)?;
        layers::register_conv(store, init, "stem", self.config.encoder.in_channels, w(0), [3; 3])?;
        for block in &self.down {
            block.register(store, init)?;
        }
        self.bridge.register(store, init)?;
        for l in (0..DEPTH).rev() {
            layers::register_conv_transpose(store, init, &format!("up{l}.upsample"), w(l + 1), w(l), self.factors[l])?;
            if Self::fuses(l) {
                let c = self.config.encoder.channels(l);
                layers::register_conv(store, init, &format!("up{l}.fuse"), c, w(l), [1; 3])?;
            }
            self.up[l].register(store, init)?;
        }
        layers::register_conv(store, init, "head", w(0), 1, [1; 3])
    }

    /// Freshly initialised parameters; identical for identical seeds.
    pub fn init_weights<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.register(&mut store, &mut ParamInit::new(seed))?;
        Ok(store)
    }

    /// Exact number of learnable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        // Shapes only depend on the layout, so a zero-cost seed is fine.
        Ok(count_parameters(&self.init_weights::<f32>(0)?))
    }

    /// `[B, Cin, D, H, W]` → probabilities `[B, 1, D, H, W]`.
    pub fn forward<T: Element>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        let slope = self.config.leaky_slope;
        let features = self.encoder.forward(b, x)?;
        let mut h = layers::conv(b, "stem", x, ConvGeometry::same3())?.leaky_relu(slope);
        let mut skips = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            h = self.down[l].forward(b, &h, slope)?;
            skips.push(h.clone());
            h = h.maxpool3d(self.factors[l])?;
        }
        h = self.bridge.forward(b, &h, slope)?;
        for l in (0..DEPTH).rev() {
            let f = self.factors[l];
            let geom = ConvGeometry {
                kernel: f,
                stride: f,
                padding: [0; 3],
            };
            let up = layers::conv_transpose(b, &format!("up{l}.upsample"), &h, geom)?.leaky_relu(slope);
            let mut parts = vec![up, skips[l].clone()];
            if Self::fuses(l) {
                let fused = layers::conv(b, &format!("up{l}.fuse"), &features[l - 1], ConvGeometry::pointwise())?;
                parts.push(fused);
            }
            h = self.up[l].forward(b, &concat(&parts, 1)?, slope)?;
        }
        let logits = layers::conv(b, "head", &h, ConvGeometry::pointwise())?;
        Ok(logits.sigmoid().clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP))
    }

    /// Inference helper: frozen parameters, no graph retained.
    pub fn predict<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = params.bind_frozen();
        Ok(self.forward(&b, &Var::constant(x.clone()))?.value().clone())
    }

    /// Shapes `[C, D, H, W]` of every stage output, derived from the layout
    /// without evaluating the network.
    pub fn shape_trace(&self) -> Vec<TraceEntry> {
        let mut t = Vec::new();
        let cs = |c: usize, e: [usize; 3]| [c, e[0], e[1], e[2]];
        for (s, shape) in self.encoder.feature_shapes().into_iter().enumerate() {
            t.push(TraceEntry {
                stage: format!("encoder.F{}", s + 1),
                shape,
            });
        }
        for l in 0..DEPTH {
            t.push(TraceEntry {
                stage: format!("down{l}"),
                shape: cs(self.config.width(l), self.levels[l]),
            });
        }
        t.push(TraceEntry {
            stage: "bridge".into(),
            shape: cs(self.config.width(DEPTH), self.levels[DEPTH]),
        });
        for l in (0..DEPTH).rev() {
            t.push(TraceEntry {
                stage: format!("up{l}"),
                shape: cs(self.config.width(l), self.levels[l]),
            });
        }
        t.push(TraceEntry {
            stage: "head".into(),
            shape: cs(1, self.levels[0]),
        });
        t
    }
}

/// Exact number of learnable scalars in `params`.
pub fn count_parameters<T: Element>(params: &ParamStore<T>) -> usize {
    params.numel()
}

/// Functional form of [`SstDUNet::forward`].
pub fn model_forward<T: Element>(net: &SstDUNet, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
    net.forward(b, x)
}

// ------------------------------------------------------------ checkpoints

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSTDUNET";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialises the configuration and every parameter record
/// (name, shape, element type, raw little-endian data).
pub fn encode_checkpoint<T: Element>(config: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
    let cfg = serde_json::to_vec(config)?;
    out.write_u32::<LittleEndian>(cfg.len() as u32).expect("vec write");
    out.extend_from_slice(&cfg);
    out.write_u32::<LittleEndian>(params.len() as u32).expect("vec write");
    for (name, t) in params.iter() {
        out.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        out.write_u8(t.ndim() as u8).expect("vec write");
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).expect("vec write");
        }
        out.write_u8(t.dtype().code()).expect("vec write");
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses a checkpoint held in memory; nothing is returned unless the whole
/// buffer is consistent.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>)> {
    let mut r = bytes;
    let truncated = |_| ckpt_err("file is truncated");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if r.len() < n {
        return Err(ckpt_err("file is truncated"));
    }
    let config: ModelConfig =
        serde_json::from_slice(&r[..n]).map_err(|e| ckpt_err(format!("bad config block: {e}")))?;
    r = &r[n..];
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        if r.len() < len {
            return Err(ckpt_err("file is truncated"));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| ckpt_err("parameter name is not UTF-8"))?
            .to_owned();
        r = &r[len..];
        let ndim = r.read_u8().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(truncated)? as usize);
        }
        let code = r.read_u8().map_err(truncated)?;
        let dtype = DType::from_code(code).ok_or_else(|| ckpt_err(format!("unknown element type {code}")))?;
        let numel: usize = shape.iter().product();
        let nbytes = numel
            .checked_mul(dtype.size_of())
            .ok_or_else(|| ckpt_err("record size overflows"))?;
        if r.len() < nbytes {
            return Err(ckpt_err("file is truncated"));
        }
        let (raw, rest) = r.split_at(nbytes);
        r = rest;
        let data: Vec<f32> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(f32::read_le).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| ckpt_err(format!("record {name:?}: {e}")))?;
        params.insert(name, t).map_err(|e| ckpt_err(e.to_string()))?;
    }
    if !r.is_empty() {
        return Err(ckpt_err(format!("{} trailing bytes", r.len())));
    }
    // The records must describe exactly the layout of the embedded config.
    let expected = SstDUNet::new(config.clone())
        .map_err(|e| ckpt_err(format!("embedded config is invalid: {e}")))?
        .init_weights::<f32>(0)?;
    if expected.len() != params.len() {
        return Err(ckpt_err(format!(
            "{} records but the configured model has {} parameters",
            params.len(),
            expected.len()
        )));
    }
    for ((en, et), (pn, pt)) in expected.iter().zip(params.iter()) {
        if en != pn || et.shape() != pt.shape() {
            return Err(ckpt_err(format!(
                "record {pn:?} {:?} does not match expected {en:?} {:?}",
                pt.shape(),
                et.shape()
            )));
        }
    }
    Ok((config, params))
}

pub fn save_checkpoint<T: Element>(config: &ModelConfig, params: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(config, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its embedded configuration to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ParamStore<f32>> {
    let (config, params) = load_checkpoint(path)?;
    if &config != expected {
        return Err(ckpt_err(format!(
            "checkpoint config {} does not match requested config {}",
            serde_json::to_string(&config)?,
            serde_json::to_string(expected)?
        )));
    }
    Ok(params)
}

//! Parameter registration and application helpers shared by the encoder,
//! the attention blocks and the convolutional decoder.
//!
//! Parameters are addressed by dotted names (`<prefix>.weight`,
//! `<prefix>.bias`); registration fixes both the name and the initial value.

use crate::error::Result;
use crate::tensor::{Bindings, ConvGeometry, Element, ParamInit, ParamStore, Tensor, Var};

/// Initial value of a layer's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WeightInit {
    FanIn,
    Zero,
}

/// Linear map on the last axis: weight `[in, out]`, bias `[out]`.
pub(crate) fn register_linear<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    weights: WeightInit,
) -> Result<()> {
    let w = match weights {
        WeightInit::FanIn => init.fan_in(&[fan_in, fan_out], fan_in),
        WeightInit::Zero => Tensor::zeros(&[fan_in, fan_out]),
    };
    store.insert(format!("{prefix}.weight"), w)?;
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub(crate) fn linear<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let y = x.matmul(b.get(&format!("{prefix}.weight"))?)?;
    match b.get(&format!("{prefix}.bias")) {
        Ok(bias) => y.add(bias),
        Err(_) => Ok(y),
    }
}

pub(crate) fn register_norm<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))
}

/// Layer norm epsilon used throughout the network.
pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn norm<T: Element>(b: &Bindings<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    x.layer_norm(
        b.get(&format!("{prefix}.gamma"))?,
        b.get(&format!("{prefix}.beta"))?,
        NORM_EPS,
    )
}

/// 3-D convolution: weight `[out, in, k, k, k]`, bias `[out]`.
pub(crate) fn register_conv<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
) -> Result<()> {
    let fan_in = cin * kernel.iter().product::<usize>();
    store.insert(
        format!("{prefix}.weight"),
        init.fan_in(&[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in),
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))
}

/// Transposed 3-D convolution: weight `[in, out, k, k, k]`, bias `[out]`.
pub(crate) fn register_conv_transpose<T: Element>(
    store: &mut ParamStore<T>,
    init: &mut ParamInit,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
) -> Result<()> {
    // Each output voxel of a stride == kernel transposed conv sees exactly
    // one tap per input channel.
    store.insert(
        format!("{prefix}.weight"),
        init.fan_in(&[cin, cout, kernel[0], kernel[1], kernel[2]], cin),
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))
}

pub(crate) fn conv<T: Element>(
    b: &Bindings<T>,
    prefix: &str,
    x: &Var<T>,
    geom: ConvGeometry,
) -> Result<Var<T>> {
    x.conv3d(
        b.get(&format!("{prefix}.weight"))?,
        Some(b.get(&format!("{prefix}.bias"))?),
        geom,
    )
}

pub(crate) fn conv_transpose<T: Element>(
    b: &Bindings<T>,
    prefix: &str,
    x: &Var<T>,
    geom: ConvGeometry,
) -> Result<Var<T>> {
    x.conv_transpose3d(
        b.get(&format!("{prefix}.weight"))?,
        Some(b.get(&format!("{prefix}.bias"))?),
        geom,
    )
}

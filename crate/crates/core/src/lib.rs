//! Skull stripping for preclinical fMRI with a smart shifted-window
//! transformer encoder fused into a dense 3-D UNet.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and 3-D conv kernels.
//! * [`attention`]: window partitioning, cyclic shifts, W-MSA and the
//!   smart-masked shifted-window attention block.
//! * [`encoder`]: patch embedding, transformer stages and patch merging.
//! * [`network`]: the full encoder-decoder model, parameters and checkpoints.
//! * [`loss`]: Dice, cross-entropy, focal and combo losses.
//! * [`metrics`]: segmentation metrics, Hausdorff distance and statistics.
//! * [`volio`]: NIfTI-1 IO, resampling, normalization, augmentation, noise.
//! * [`post`]: thresholding and largest-connected-component extraction.
//! * [`pipeline`]: training, inference, evaluation, noise sweeps and
//!   functional-connectivity analysis.

pub mod attention;
pub mod encoder;
pub mod error;
mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod post;
pub mod tensor;
pub mod volio;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor, Var};

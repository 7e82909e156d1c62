//! End-to-end workflows: configuration, the AdamW/warmup-cosine training
//! loop, dataset splitting, inference with post-processing, evaluation,
//! noise sweeps and functional-connectivity analysis.
//!
//! Everything here is single-threaded and seeded, so a `(seed, config,
//! data)` triple fixes every logged number bit for bit.

mod config;
mod fc;
mod gradsuite;
mod infer;
mod log;
mod optim;
mod splits;
mod train;

use std::path::Path;

pub use config::{apply_override, model_profile, DataConfig, FcConfig, PipelineConfig, PostConfig, TrainConfig};
pub use fc::{fc_analysis, fc_group, roi_time_series, subject_connectivity, Atlas, FcGroup, FcResult, FcSubject};
pub use gradsuite::{gradcheck_suite, GradCase, GradSuite, GRADCHECK_STEP, MODEL_TOLERANCE, OP_TOLERANCE};
pub use infer::{
    evaluate, evaluate_items, load_eval_items, noise_sweep, sweep_levels, write_sweep_csv, EvalItem, Evaluation,
    NoiseLevelResult, Prediction, Predictor, NOISE_LEVELS,
};
pub use log::JsonLogger;
pub use optim::{adamw_step, lr_at, AdamState, AdamWConfig};
pub use splits::{make_splits, select_best_repeat, SplitPlan, REPEATS, TEST_FRACTION, VAL_FRACTION};
pub use train::{
    checksum_hex, load_sample, resolve_split, train, train_on, validation_dice, EpochRecord, Sample, StopReason,
    TrainArtifacts, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::post::Mask;
use crate::volio::{read_manifest, read_nifti, read_series, Series};

/// Mixes `parts` into `base` (SplitMix64 finalizer per part), giving
/// independent seeds for independent random streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Reads a mask volume; voxels with value > 0 are foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let v = read_nifti(path)?;
    Mask::new(v.shape, v.data.iter().map(|&x| x > 0.0).collect())
}

/// Loads the series and masks of an FC manifest (`path` = 4-D series,
/// `mask` = brain mask).
pub fn load_fc_group(manifest: &Path) -> Result<Vec<(Series, Mask)>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let mask = e
                .mask
                .as_deref()
                .ok_or_else(|| Error::Config(format!("subject {} has no mask", e.subject_id)))?;
            Ok((read_series(&e.path)?, load_mask(mask)?))
        })
        .collect()
}

/// Runs [`fc_analysis`] on the files named by `cfg`.
pub fn run_fc(cfg: &FcConfig) -> Result<FcResult> {
    let need = |p: &Option<std::path::PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("fc.{key} is required")))
    };
    let atlas = Atlas::from_volume(&read_nifti(&need(&cfg.atlas, "atlas")?)?, cfg.rois)?;
    let a = load_fc_group(&need(&cfg.group_a, "group_a")?)?;
    let b = load_fc_group(&need(&cfg.group_b, "group_b")?)?;
    fc_analysis(&fc_view(&a), &fc_view(&b), &atlas)
}

fn fc_view(group: &[(Series, Mask)]) -> Vec<FcSubject<'_>> {
    group.iter().map(|(series, mask)| FcSubject { series, mask }).collect()
}

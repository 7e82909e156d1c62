//! Inference, evaluation and the noise-robustness sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{derive_seed, load_mask, PostConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, MetricsRow, Summary};
use crate::network::{load_checkpoint, ModelConfig, SstDUNet};
use crate::post::{binarize, largest_component, Mask};
use crate::tensor::ParamStore;
use crate::volio::{normalize, read_nifti, resize, rician_noise, Interpolation, ManifestEntry, Volume};

/// Noise levels of the robustness sweep, as fractions of the maximum
/// intensity: 1% to 15% in steps of 2%.
pub const NOISE_LEVELS: [f64; 8] = [0.01, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15];

/// [`NOISE_LEVELS`], optionally preceded by a noise-free control level.
pub fn sweep_levels(with_control: bool) -> Vec<f64> {
    with_control.then_some(0.0).into_iter().chain(NOISE_LEVELS).collect()
}

/// A model ready for inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub net: SstDUNet,
    pub params: ParamStore<f32>,
    pub post: PostConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Network output on the model grid.
    pub probability: Volume,
    /// Final mask on the input volume's grid.
    pub mask: Mask,
    /// Wall-clock seconds for the whole chain.
    pub seconds: f64,
}

impl Predictor {
    pub fn new(config: ModelConfig, params: ParamStore<f32>, post: PostConfig) -> Result<Self> {
        post.validate()?;
        Ok(Predictor {
            net: SstDUNet::new(config)?,
            params,
            post,
        })
    }

    pub fn from_checkpoint(path: &Path, post: PostConfig) -> Result<Self> {
        let (config, params) = load_checkpoint(path)?;
        Self::new(config, params, post)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// resize → normalize → forward → binarize → largest component →
    /// nearest-neighbour resize back to the input grid.
    ///
    /// Nearest-neighbour downsampling can split a component, so the largest
    /// component is taken once more on the native grid; on an already
    /// connected mask this is the identity.
    pub fn predict(&self, volume: &Volume) -> Result<Prediction> {
        let start = Instant::now();
        let grid = self.config().input_size;
        let x = normalize(&resize(volume, grid, Interpolation::Trilinear)?)?;
        let prob = self.net.predict(&self.params, &x.to_tensor::<f32>())?;
        let probability = Volume::from_tensor(&prob, x.spacing)?;
        let mask = binarize(grid, &probability.data, self.post.threshold)?;
        let mask = largest_component(&mask, self.post.connectivity).mask;
        let model_mask = Volume {
            shape: grid,
            data: mask.to_values(),
            spacing: x.spacing,
            header: None,
        };
        let native = resize(&model_mask, volume.shape, Interpolation::Nearest)?;
        let native = Mask::from_binary_values(volume.shape, &native.data)?;
        let mask = largest_component(&native, self.post.connectivity).mask;
        Ok(Prediction {
            probability,
            mask,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// A subject to evaluate; `truth` is `None` when no mask is available.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub subject_id: String,
    pub image: Volume,
    pub truth: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Subjects without a ground-truth mask; excluded from the report.
    pub missing: Vec<String>,
    /// Mean prediction wall-clock seconds per evaluated subject.
    pub mean_seconds: Option<f64>,
}

/// Reads manifest entries (image plus optional mask).
pub fn load_eval_items(entries: &[ManifestEntry]) -> Result<Vec<EvalItem>> {
    entries
        .iter()
        .map(|e| {
            Ok(EvalItem {
                subject_id: e.subject_id.clone(),
                image: read_nifti(&e.path)?,
                truth: e.mask.as_deref().map(load_mask).transpose()?,
            })
        })
        .collect()
}

fn check_truth(item: &EvalItem, truth: &Mask) -> Result<()> {
    if truth.shape() != item.image.shape {
        return Err(Error::shape(format!(
            "subject {}: mask {:?} does not match image {:?}",
            item.subject_id,
            truth.shape(),
            item.image.shape
        )));
    }
    Ok(())
}

/// Predicts every subject and scores it against its mask (Hausdorff in the
/// image's physical units).
pub fn evaluate_items(p: &Predictor, items: &[EvalItem]) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut seconds = Vec::new();
    for item in items {
        let Some(truth) = &item.truth else {
            missing.push(item.subject_id.clone());
            continue;
        };
        check_truth(item, truth)?;
        let pred = p.predict(&item.image)?;
        seconds.push(pred.seconds);
        rows.push(MetricsRow::evaluate(&item.subject_id, truth, &pred.mask, Some(item.image.spacing))?);
    }
    Ok(Evaluation {
        report: MetricsReport::new(rows),
        missing,
        mean_seconds: Summary::of(seconds).mean,
    })
}

pub fn evaluate(p: &Predictor, entries: &[ManifestEntry]) -> Result<Evaluation> {
    evaluate_items(p, &load_eval_items(entries)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelResult {
    /// Noise σ as a fraction of each volume's maximum intensity.
    pub level: f64,
    pub evaluation: Evaluation,
}

/// Evaluates after adding Rician noise at each level. Each subject uses the
/// same noise seed at every level, so levels differ only in σ.
pub fn noise_sweep(p: &Predictor, items: &[EvalItem], levels: &[f64], seed: u64) -> Result<Vec<NoiseLevelResult>> {
    levels
        .iter()
        .map(|&level| {
            let noisy = items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    Ok(EvalItem {
                        image: rician_noise(&item.image, level, derive_seed(seed, &[3, i as u64]))?,
                        ..item.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NoiseLevelResult {
                level,
                evaluation: evaluate_items(p, &noisy)?,
            })
        })
        .collect()
}

/// CSV with one row per level: `level,n,dice_mean,dice_std,…,sen_std`.
pub fn write_sweep_csv<W: Write>(results: &[NoiseLevelResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
    w.write_record([
        "level", "n", "dice_mean", "dice_std", "ppv_mean", "ppv_std", "hd_mean", "hd_std", "sen_mean", "sen_std",
    ])
    .map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let a = &r.evaluation.report.aggregate;
        let mut rec = vec![r.level.to_string(), a.dice.n.to_string()];
        for s in [&a.dice, &a.ppv, &a.hd, &a.sen] {
            rec.push(cell(s.mean));
            rec.push(cell(s.std));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Contract(format!("csv flush failed: {e}")))
}

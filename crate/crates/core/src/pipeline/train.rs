//! The training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{derive_seed, load_mask, lr_at, make_splits, adamw_step, AdamState, AdamWConfig, JsonLogger, PipelineConfig, PostConfig, SplitPlan, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::combo_loss;
use crate::metrics::seg_metrics;
use crate::network::{save_checkpoint, ModelConfig, SstDUNet};
use crate::post::{binarize, largest_component, Mask};
use crate::tensor::{Element, ParamStore, Tensor, Var};
use crate::volio::{augment, normalize, read_manifest, read_nifti, resize, Interpolation, ManifestEntry, Split, Volume};

/// One training or validation subject on the model grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    /// Normalized to `[0, 1]`.
    pub image: Volume,
    pub mask: Mask,
}

impl Sample {
    /// Resamples `image` (trilinear, then min-max normalized) and `mask`
    /// (nearest) onto the `input_size` grid.
    pub fn prepare(subject_id: impl Into<String>, image: &Volume, mask: &Mask, input_size: [usize; 3]) -> Result<Self> {
        let subject_id = subject_id.into();
        if image.shape != mask.shape() {
            return Err(Error::shape(format!(
                "subject {subject_id}: image {:?} and mask {:?} differ in shape",
                image.shape,
                mask.shape()
            )));
        }
        let img = normalize(&resize(image, input_size, Interpolation::Trilinear)?)?;
        let m = Volume {
            shape: mask.shape(),
            data: mask.to_values(),
            spacing: image.spacing,
            header: None,
        };
        let m = resize(&m, input_size, Interpolation::Nearest)?;
        Ok(Sample {
            subject_id,
            image: img,
            mask: Mask::from_binary_values(input_size, &m.data)?,
        })
    }
}

/// One line of the epoch log. Contains no timing, so identical runs
/// produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean combo loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean hard Dice of the epoch's training forward passes.
    pub train_dice: f64,
    /// Mean Dice on the validation subjects (thresholded, largest component).
    pub val_dice: Option<f64>,
    /// Optimizer steps taken so far.
    pub steps: usize,
    /// Parameter checksum after the epoch.
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    MaxSteps,
    TargetDice,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    /// Epoch whose parameters are `best_params`.
    pub best_epoch: usize,
    /// Validation Dice of the best epoch (training Dice without validation data).
    pub best_score: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub stop: StopReason,
    /// Checksum of the final parameters.
    pub checksum: u64,
}

pub fn checksum_hex(c: u64) -> String {
    format!("{c:016x}")
}

fn stack<T: Element>(items: &[&Volume]) -> Result<Tensor<T>> {
    let [d, h, w] = items[0].shape;
    let data = items
        .iter()
        .flat_map(|v| v.data.iter().map(|&x| T::from_f64_lossy(x)))
        .collect();
    Tensor::new(&[items.len(), 1, d, h, w], data)
}

fn mask_dice(prob: &[f64], shape: [usize; 3], truth: &Mask, post: &PostConfig, keep_largest: bool) -> Result<f64> {
    let mut pred = binarize(shape, prob, post.threshold)?;
    if keep_largest {
        pred = largest_component(&pred, post.connectivity).mask;
    }
    Ok(seg_metrics(truth, &pred)?.dice)
}

/// Mean validation Dice of `params` on `samples` (`None` without samples).
pub fn validation_dice(net: &SstDUNet, params: &ParamStore<f32>, samples: &[Sample], post: &PostConfig) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in samples {
        let prob = net.predict(params, &s.image.to_tensor::<f32>())?;
        let values: Vec<f64> = prob.data().iter().map(|&v| v as f64).collect();
        total += mask_dice(&values, s.image.shape, &s.mask, post, true)?;
    }
    Ok(Some(total / samples.len() as f64))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Trains a freshly initialised model on in-memory samples.
///
/// Everything random derives from `cfg.seed`: initialisation, the per-epoch
/// sample order and the per-sample augmentation seeds. When `out_dir` is
/// given, `epochs.jsonl` is rewritten after every epoch, `best.ckpt` whenever
/// the selection score improves, and `last.ckpt` at the end.
pub fn train_on(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
    log: &JsonLogger,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    for s in train.iter().chain(val) {
        if s.image.shape != model.input_size || s.mask.shape() != model.input_size {
            return Err(Error::shape(format!(
                "sample {} has shape {:?}, model expects {:?}",
                s.subject_id, s.image.shape, model.input_size
            )));
        }
    }
    let net = SstDUNet::new(model.clone())?;
    let mut params = net.init_weights::<f32>(cfg.seed)?;
    let adam = AdamWConfig::from(cfg);
    let mut state = AdamState::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut steps = 0usize;
    let mut stop = StopReason::Completed;
    log.event(
        "train_start",
        json!({"train": train.len(), "val": val.len(), "parameters": params.numel(), "seed": cfg.seed}),
    );

    'epochs: for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64])));
        let (mut loss_sum, mut dice_sum, mut batches, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let images = chunk
                .iter()
                .map(|&i| {
                    let mut aug = cfg.augment;
                    aug.seed = derive_seed(cfg.seed ^ cfg.augment.seed, &[2, epoch as u64, i as u64]);
                    augment(&train[i].image, &aug)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some((k, _)) = images.iter().enumerate().find(|(_, v)| v.data.iter().any(|x| !x.is_finite())) {
                return Err(Error::Training(format!(
                    "non-finite input intensities in subject {} at epoch {epoch}",
                    train[chunk[k]].subject_id
                )));
            }
            let x = stack::<f32>(&images.iter().collect::<Vec<_>>())?;
            let masks: Vec<Volume> = chunk
                .iter()
                .map(|&i| Volume::zeros(model.input_size).with_data(train[i].mask.to_values()))
                .collect();
            let y = stack::<f32>(&masks.iter().collect::<Vec<_>>())?;

            let bindings = params.bind();
            let ids: Vec<&str> = chunk.iter().map(|&i| train[i].subject_id.as_str()).collect();
            let diagnose = |what: String| {
                Error::Training(format!(
                    "{what} at epoch {epoch}, step {}, lr {lr:e}, subjects {ids:?}",
                    steps + 1
                ))
            };
            // Overflowing activations surface as fully masked softmax rows.
            let pred = net.forward(&bindings, &Var::constant(x)).map_err(|e| match e {
                Error::DegenerateMask { .. } => diagnose(format!("non-finite activations ({e})")),
                e => e,
            })?;
            let loss = combo_loss(&pred, &y, &cfg.loss)?;
            let value = loss.value().item().to_f64_lossy();
            if !value.is_finite() {
                return Err(diagnose(format!("non-finite loss {value}")));
            }
            let per = pred.value().numel() / chunk.len();
            for (k, &i) in chunk.iter().enumerate() {
                let prob: Vec<f64> = pred.value().data()[k * per..(k + 1) * per].iter().map(|&v| v as f64).collect();
                dice_sum += mask_dice(&prob, model.input_size, &train[i].mask, &cfg.post, false)?;
            }
            loss.backward()?;
            adamw_step(&mut params, &bindings.grads(), &mut state, lr, &adam)?;
            steps += 1;
            loss_sum += value;
            batches += 1;
            seen += chunk.len();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = StopReason::MaxSteps;
                break;
            }
        }
        let val_dice = validation_dice(&net, &params, val, &cfg.post)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_dice: dice_sum / seen as f64,
            val_dice,
            steps,
            checksum: checksum_hex(params.checksum()),
        };
        log.event("epoch", serde_json::to_value(&record)?);
        let score = val_dice.unwrap_or(record.train_dice);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            if let Some(dir) = out_dir {
                save_checkpoint(model, &params, &dir.join("best.ckpt"))?;
            }
            best = Some((score, epoch, params.clone()));
        }
        let reached = cfg.target_train_dice.is_some_and(|t| record.train_dice >= t);
        epochs.push(record);
        if let Some(dir) = out_dir {
            write_jsonl(&dir.join("epochs.jsonl"), &epochs)?;
        }
        if stop == StopReason::MaxSteps {
            break 'epochs;
        }
        if reached {
            stop = StopReason::TargetDice;
            break 'epochs;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &params, &dir.join("last.ckpt"))?;
    }
    let (best_score, best_epoch, best_params) = best.expect("at least one epoch runs");
    let checksum = params.checksum();
    log.event(
        "train_end",
        json!({"steps": steps, "stop": stop, "best_epoch": best_epoch, "best_score": best_score, "checksum": checksum_hex(checksum)}),
    );
    Ok(TrainOutcome {
        params,
        best_params,
        best_epoch,
        best_score,
        epochs,
        steps,
        stop,
        checksum,
    })
}

/// Loads a manifest entry with its mask onto the model grid.
pub fn load_sample(entry: &ManifestEntry, input_size: [usize; 3]) -> Result<Sample> {
    let mask_path = entry
        .mask
        .as_ref()
        .ok_or_else(|| Error::Config(format!("subject {} has no mask", entry.subject_id)))?;
    let image = read_nifti(&entry.path)?;
    let mask = load_mask(mask_path)?;
    Sample::prepare(&entry.subject_id, &image, &mask, input_size)
}

/// The split used for training: the manifest's own assignment when every
/// entry carries one, otherwise repeat `data.repeat` of [`make_splits`].
pub fn resolve_split(entries: &[ManifestEntry], split_seed: u64, repeat: usize) -> Result<SplitPlan> {
    if !entries.is_empty() && entries.iter().all(|e| e.split.is_some()) {
        let pick = |s: Split| {
            let mut v: Vec<String> = entries
                .iter()
                .filter(|e| e.split == Some(s))
                .map(|e| e.subject_id.clone())
                .collect();
            v.sort();
            v
        };
        return Ok(SplitPlan {
            repeat,
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
        });
    }
    let ids: Vec<String> = entries.iter().map(|e| e.subject_id.clone()).collect();
    let plans = make_splits(&ids, split_seed)?;
    plans
        .into_iter()
        .find(|p| p.repeat == repeat)
        .ok_or_else(|| Error::Config(format!("no split repeat {repeat}")))
}

/// Files written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub epoch_log: PathBuf,
    pub split: SplitPlan,
}

/// Trains from `cfg.data.manifest` into `cfg.data.output_dir`.
pub fn train(cfg: &PipelineConfig, log: &JsonLogger) -> Result<(TrainOutcome, TrainArtifacts)> {
    cfg.validate()?;
    let manifest = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is required for training".into()))?;
    let entries = read_manifest(manifest)?;
    let split = resolve_split(&entries, cfg.data.split_seed, cfg.data.repeat)?;
    let load = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let e = entries.iter().find(|e| &e.subject_id == id).expect("split ids come from the manifest");
                load_sample(e, cfg.model.input_size)
            })
            .collect()
    };
    let train_samples = load(&split.train)?;
    let val_samples = load(&split.val)?;
    let out = &cfg.data.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;
    let split_path = out.join("split.json");
    std::fs::write(&split_path, serde_json::to_string_pretty(&split)?).map_err(|e| Error::io(&split_path, e))?;
    log.event("split", serde_json::to_value(&split)?);
    let outcome = train_on(&cfg.model, &cfg.train, &train_samples, &val_samples, Some(out), log)?;
    Ok((
        outcome,
        TrainArtifacts {
            best_checkpoint: out.join("best.ckpt"),
            last_checkpoint: out.join("last.ckpt"),
            epoch_log: out.join("epochs.jsonl"),
            split,
        },
    ))
}

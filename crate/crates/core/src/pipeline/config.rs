//! Structured run configuration: a TOML document with `model`, `train`,
//! `data` and `fc` sections, layered over built-in profiles and overridden
//! by `section.key=value` assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::ModelConfig;
use crate::post::{Connectivity, DEFAULT_THRESHOLD};
use crate::volio::AugmentConfig;

/// Named model profiles selectable with `model.profile`.
pub fn model_profile(name: &str) -> Result<ModelConfig> {
    match name {
        "default" | "production" => Ok(ModelConfig::default()),
        "test" | "test-scale" => Ok(ModelConfig::test_scale()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => Err(Error::Config(format!(
            "unknown model profile {name:?} (expected default, test or tiny)"
        ))),
    }
}

/// Thresholding and connected-component settings shared by validation,
/// prediction and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostConfig {
    pub threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            threshold: DEFAULT_THRESHOLD,
            connectivity: Connectivity::default(),
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Target (peak) learning rate.
    pub learning_rate: f64,
    /// Decoupled AdamW weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Warmup starts at `learning_rate / lr_start_divisor`.
    pub lr_start_divisor: f64,
    /// Cosine phase ends at `learning_rate / lr_end_divisor`.
    pub lr_end_divisor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossConfig,
    /// Seeds initialisation, data order and augmentation.
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once an epoch's training Dice reaches this value.
    pub target_train_dice: Option<f64>,
    pub augment: AugmentConfig,
    pub post: PostConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 2,
            warmup_epochs: 50,
            total_epochs: 300,
            lr_start_divisor: 100.0,
            lr_end_divisor: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
            max_steps: None,
            target_train_dice: None,
            augment: AugmentConfig::default(),
            post: PostConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return bad("batch_size and total_epochs must be positive".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        for (name, f) in [("lr_start_divisor", self.lr_start_divisor), ("lr_end_divisor", self.lr_end_divisor)] {
            if !(f >= 1.0 && f.is_finite()) {
                return bad(format!("{name} must be >= 1, got {f}"));
            }
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("AdamW needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if let Some(d) = self.target_train_dice {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("target_train_dice must lie in [0, 1], got {d}"));
            }
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.post.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON-lines manifest of training subjects.
    pub manifest: Option<PathBuf>,
    /// Checkpoints, epoch logs and reports are written here.
    pub output_dir: PathBuf,
    /// Seed of the train/val/test assignment.
    pub split_seed: u64,
    /// Which of the five split repeats to train (1-based).
    pub repeat: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            output_dir: PathBuf::from("runs"),
            split_seed: 0,
            repeat: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcConfig {
    /// Integer-labelled ROI volume on the series grid.
    pub atlas: Option<PathBuf>,
    /// Number of ROIs; defaults to the largest atlas label.
    pub rois: Option<usize>,
    /// Manifests of the two pipelines: `path` is a 4-D series, `mask` its brain mask.
    pub group_a: Option<PathBuf>,
    pub group_b: Option<PathBuf>,
}

/// The complete configuration of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub fc: FcConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Recursively merges `over` into `base`; tables merge key by key, every
/// other value replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Applies one `a.b.c=value` assignment to a TOML table.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let slot = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_owned(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document and applies `overrides` (`section.key=value`).
    /// `model.profile` selects the base model; other `model` keys refine it.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut model = match doc.remove("model") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::Config("`model` must be a table".into())),
            None => toml::Table::new(),
        };
        let profile = match model.remove("profile") {
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(Error::Config(format!("model.profile must be a string, got {v}"))),
            None => "default".to_owned(),
        };
        let mut merged = toml::Value::try_from(model_profile(&profile)?).map_err(config_err)?;
        merge(&mut merged, toml::Value::Table(model));
        doc.insert("model".into(), merged);
        let cfg: PipelineConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(1..=super::REPEATS).contains(&self.data.repeat) {
            return Err(Error::Config(format!(
                "data.repeat must lie in 1..={}, got {}",
                super::REPEATS,
                self.data.repeat
            )));
        }
        Ok(())
    }
}

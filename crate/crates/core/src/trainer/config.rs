//! Trainer configuration: JSON with defaults, dotted-key overrides and a
//! single resolved form.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentationConfig;
use crate::codec::CodecConfig;
use crate::data::{load_dataset, split_labeled_unlabeled, DatasetSpec, DatasetSplit};
use crate::ema::EmaConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, WeightSchedule};
use crate::nn::{ModelConfig, OptimizerConfig};
use crate::pseudo::SelectionConfig;
use crate::uncertainty::UncertaintyConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    MeanTeacher,
    Mdss,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::config("method", format!("unknown method `{s}` (supervised, mean_teacher, mdss)")))
    }
}

/// Which network is scored on the test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNetwork {
    T1,
    T2,
    Student,
    /// Mean of the two teachers' final-stack heatmaps.
    Average,
}

/// Where the CLI finds data. Unused when a split is passed in directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Fraction of fully labeled train rows that keep their labels.
    pub labeled_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: None,
            test_manifest: None,
            labeled_fraction: 0.3,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives data order and training augmentation.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub ema: EmaConfig,
    pub uncertainty: UncertaintyConfig,
    pub selection: SelectionConfig,
    pub codec: CodecConfig,
    pub augmentation: AugmentationConfig,
    /// Student 1 uses `model.seed`, student 2 `model.seed + 1`.
    pub model: ModelConfig,
    pub eval_network: EvalNetwork,
    pub pck_threshold: f64,
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: Method::Mdss,
            epochs: 500,
            batch_size: 2,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            ema: EmaConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            selection: SelectionConfig::default(),
            codec: CodecConfig::default(),
            augmentation: AugmentationConfig::default(),
            model: ModelConfig::default(),
            eval_network: EvalNetwork::T1,
            pck_threshold: 0.2,
            checkpoint_every: 1,
            data: DataConfig::default(),
        }
    }
}

const ALIASES: [(&str, &str); 3] = [
    ("lambda_p", "weights.lambda_p"),
    ("lambda_a", "weights.lambda_a"),
    ("lambda_c", "weights.lambda_c"),
];

fn section<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T> {
    let v = obj.get(key).cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| Error::config(key, e.to_string()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl TrainerConfig {
    /// Layers `value` over the defaults, then checks every section,
    /// naming the first offending field.
    pub fn from_value(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::config("<root>", "config must be a JSON object"));
        }
        let mut full = serde_json::to_value(TrainerConfig::default())?;
        let known: Vec<String> = full.as_object().expect("object").keys().cloned().collect();
        if let Some(k) = value.as_object().expect("object").keys().find(|k| !known.contains(k)) {
            return Err(Error::config(k.as_str(), "unknown field"));
        }
        merge(&mut full, value);
        let o = full.as_object().expect("object");
        let cfg = TrainerConfig {
            method: section(o, "method")?,
            epochs: section(o, "epochs")?,
            batch_size: section(o, "batch_size")?,
            seed: section(o, "seed")?,
            optimizer: section(o, "optimizer")?,
            weights: section(o, "weights")?,
            ema: section(o, "ema")?,
            uncertainty: section(o, "uncertainty")?,
            selection: section(o, "selection")?,
            codec: section(o, "codec")?,
            augmentation: section(o, "augmentation")?,
            model: section(o, "model")?,
            eval_network: section(o, "eval_network")?,
            pck_threshold: section(o, "pck_threshold")?,
            checkpoint_every: section(o, "checkpoint_every")?,
            data: section(o, "data")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config;
    /// `lambda_p`, `lambda_a` and `lambda_c` set a constant schedule. Values
    /// parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            let mut value: Value =
                serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            let mut path = key.to_string();
            if let Some((_, full)) = ALIASES.iter().find(|(a, _)| *a == key) {
                let w = value
                    .as_f64()
                    .ok_or_else(|| Error::config(key, format!("expected a number, got `{raw}`")))?;
                value = serde_json::to_value(WeightSchedule::constant(w))?;
                path = full.to_string();
            }
            set_path(&mut v, &path, value)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        if !(self.pck_threshold > 0.0) {
            return Err(Error::config("pck_threshold", "must be positive"));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.ema.validate()?;
        self.uncertainty.validate()?;
        self.selection.validate()?;
        self.codec.validate()?;
        self.augmentation.validate("augmentation")?;
        self.model.validate()?;
        if self.model.heatmap_size != self.codec.heatmap_size {
            return Err(Error::config("codec.heatmap_size", "must equal model.heatmap_size"));
        }
        if self.model.image_size != self.codec.image_size {
            return Err(Error::config("codec.image_size", "must equal model.image_size"));
        }
        if !(self.data.labeled_fraction > 0.0 && self.data.labeled_fraction <= 1.0) {
            return Err(Error::config("data.labeled_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }

    /// Checks the config against a dataset.
    pub fn check_spec(&self, spec: &DatasetSpec) -> Result<()> {
        if self.model.k != spec.k {
            return Err(Error::config("model.K", format!("{} but the dataset has K={}", self.model.k, spec.k)));
        }
        if self.model.image_size != spec.image_size {
            return Err(Error::config(
                "model.image_size",
                format!("{} but the dataset has image_size {}", self.model.image_size, spec.image_size),
            ));
        }
        if self.model.in_channels != 3 {
            return Err(Error::config("model.in_channels", "images are RGB"));
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Loads the manifests named in `data`. Fully labeled train rows are split by
/// `labeled_fraction`; the hidden labels become the diagnostic store. Rows
/// that are unlabeled in the manifest stay unlabeled without diagnostics.
pub fn load_training_data(data: &DataConfig, base: &Path) -> Result<DatasetSplit> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let train_path = data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.train_manifest", "required"))?;
    let test_path = data
        .test_manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.test_manifest", "required"))?;
    let train = load_dataset(&resolve(train_path))?;
    let test = load_dataset(&resolve(test_path))?;
    if test.spec != train.spec {
        return Err(Error::Schema {
            context: test_path.display().to_string(),
            reason: "spec differs from the train manifest".into(),
        });
    }
    if !test.unlabeled.is_empty() {
        return Err(Error::Schema {
            context: test_path.display().to_string(),
            reason: "test samples must be labeled".into(),
        });
    }
    let split = split_labeled_unlabeled(&train.labeled, data.labeled_fraction, data.split_seed)?;
    let mut unlabeled = split.unlabeled;
    unlabeled.extend(train.unlabeled);
    Ok(DatasetSplit {
        spec: train.spec,
        labeled: split.labeled,
        unlabeled,
        test: test.labeled,
        held_back: (!split.held_back.is_empty()).then_some(split.held_back),
    })
}

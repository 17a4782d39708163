//! Experiment configuration: presets, TOML files and `key=value` overrides.
//!
//! Resolution order is preset defaults, then the file, then overrides, with
//! later sources replacing individual keys of earlier ones.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{Dataset, ManifestDataset, ToyDataset};
use super::train::TrainConfig;
use super::PipelineError;
use crate::datasets::{
    load_pix3d_manifest, load_shapenet_manifest, make_toy_dataset_with, PreprocessConfig, SampleRecord, Split,
    ToyConfig,
};
use crate::model::ModelConfig;
use crate::vqvae::VqConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Toy,
    Shapenet,
    Pix3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Dataset root for on-disk kinds.
    pub root: Option<PathBuf>,
    pub toy: ToyConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Toy,
            root: None,
            toy: ToyConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl DataConfig {
    fn root(&self) -> Result<&Path, PipelineError> {
        self.root
            .as_deref()
            .ok_or_else(|| PipelineError::Config("data.root is required for on-disk datasets".into()))
    }

    /// Manifest records of an on-disk dataset. Pix3D has no splits, so every
    /// split yields the whole filtered set.
    pub fn records(&self, split: Split) -> Result<Vec<SampleRecord>, PipelineError> {
        Ok(match self.kind {
            DataKind::Toy => {
                return Err(PipelineError::Config("the toy dataset has no on-disk manifest".into()));
            }
            DataKind::Shapenet => load_shapenet_manifest(self.root()?, split)?,
            DataKind::Pix3d => load_pix3d_manifest(self.root()?)?,
        })
    }

    /// Opens the dataset for `split`. The toy set is an overfitting fixture,
    /// so all of its splits are the same objects.
    pub fn open(&self, split: Split) -> Result<Box<dyn Dataset>, PipelineError> {
        Ok(match self.kind {
            DataKind::Toy => Box::new(ToyDataset::new(make_toy_dataset_with(&self.toy)?)),
            _ => {
                self.preprocess.validate()?;
                Box::new(ManifestDataset {
                    records: self.records(split)?,
                    preprocess: self.preprocess.clone(),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub views: usize,
    pub threshold: f32,
    /// Seed for choosing evaluation views.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 1,
            threshold: 0.5,
            seed: 1234,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Small,
    Base,
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            other => Err(PipelineError::Config(format!(
                "unknown preset {other:?} (expected toy, small or base)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub vq: VqConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => {
                let model = ModelConfig::toy();
                Self {
                    train: TrainConfig {
                        learning_rate: 3e-4,
                        batch_size: 8,
                        max_steps: 500,
                        views_per_sample: 1,
                        ..TrainConfig::default()
                    },
                    data: DataConfig {
                        toy: ToyConfig {
                            image_size: model.image_size(),
                            resolution: model.resolution,
                            ..ToyConfig::default()
                        },
                        preprocess: PreprocessConfig::with_size(model.image_size()),
                        ..DataConfig::default()
                    },
                    eval: EvalConfig::default(),
                    vq: VqConfig::toy(),
                    model,
                }
            }
            Preset::Small | Preset::Base => {
                let model = if preset == Preset::Small {
                    ModelConfig::small()
                } else {
                    ModelConfig::base()
                };
                Self {
                    train: TrainConfig::default(),
                    data: DataConfig {
                        kind: DataKind::Shapenet,
                        toy: ToyConfig {
                            image_size: model.image_size(),
                            resolution: model.resolution,
                            ..ToyConfig::default()
                        },
                        preprocess: PreprocessConfig::with_size(model.image_size()),
                        ..DataConfig::default()
                    },
                    eval: EvalConfig::default(),
                    vq: VqConfig::default(),
                    model,
                }
            }
        }
    }

    /// Resolves `preset`, then `file` (if any), then each `key.path=value`
    /// override. Values parse as TOML literals, falling back to strings.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut tree = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| PipelineError::Config(format!("serializing preset: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
            let layer: toml::Table =
                toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, toml::Value::Table(layer));
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut layer = value;
            for part in key.trim().split('.').rev() {
                if part.is_empty() {
                    return Err(PipelineError::Config(format!(
                        "override {item:?} has an empty key segment"
                    )));
                }
                let mut t = toml::Table::new();
                t.insert(part.to_string(), layer);
                layer = toml::Value::Table(t);
            }
            merge(&mut tree, layer);
        }
        let cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.train.validate()?;
        self.vq.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(PipelineError::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.eval.views == 0 {
            return Err(PipelineError::Config("eval.views must be at least 1".into()));
        }
        if self.data.kind != DataKind::Toy && self.data.root.is_none() {
            return Err(PipelineError::Config(
                "data.root is required for on-disk datasets".into(),
            ));
        }
        let (key, size) = match self.data.kind {
            DataKind::Toy => ("data.toy.image_size", self.data.toy.image_size),
            _ => ("data.preprocess.target_size", self.data.preprocess.target_size),
        };
        if size != self.model.image_size() {
            return Err(PipelineError::Config(format!(
                "{key} is {size} but the model expects {}-pixel images",
                self.model.image_size()
            )));
        }
        if self.data.kind == DataKind::Toy && self.data.toy.resolution != self.model.resolution {
            return Err(PipelineError::Config(format!(
                "data.toy.resolution is {} but the model outputs {}³",
                self.data.toy.resolution, self.model.resolution
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Recursively overlays `layer` onto `base`; tables merge, anything else replaces.
fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
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

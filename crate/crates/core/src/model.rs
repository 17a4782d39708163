//! The assembled reconstruction network and its configuration presets.

use std::collections::BTreeMap;

use mvrecon_tensor::{Ctx, Init, ParamCounter, ParamId, ParamSink, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder3d::{reshape_to_cube, CnnDecoder, CnnDecoderConfig, DecoderConfig, MlpDecoder, QueryDecoder};
use crate::encoder::{load_pretrained, pool_view_vars, Encoder, EncoderConfig, EncoderVariant, FeatureSeq};
use crate::voxgrid::VoxelField;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("weight import failed: {0}")]
    Import(String),
}

/// Which network turns the query states into voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Cnn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub cnn: CnnDecoderConfig,
    #[serde(default)]
    pub head: HeadKind,
    /// Output grid side.
    pub resolution: usize,
}

impl ModelConfig {
    /// The large configuration: base-width encoder, 8-layer decoder.
    pub fn base() -> Self {
        Self {
            encoder: EncoderConfig::base(),
            decoder: DecoderConfig::base(),
            cnn: CnnDecoderConfig::default(),
            head: HeadKind::Cnn,
            resolution: 32,
        }
    }

    /// The small configuration: tiny-width encoder, 6-layer decoder.
    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::small(),
            ..Self::base()
        }
    }

    /// A reduced small configuration sized for CPU training on toy data:
    /// 32-pixel inputs in 8-pixel patches, width 64, two encoder and two
    /// decoder layers, 16 voxel-decoder channels.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                dim: 64,
                patch_size: 8,
                token_grid: 4,
                cls_token: false,
                ..EncoderConfig::tiny()
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                dim: 64,
                query_side: 4,
            },
            cnn: CnnDecoderConfig {
                channels: 16,
                ..Default::default()
            },
            head: HeadKind::Cnn,
            resolution: 32,
        }
    }

    pub fn image_size(&self) -> usize {
        self.encoder.image_size()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(ModelError::Config(format!(
                "encoder width {} differs from decoder width {}",
                self.encoder.dim, self.decoder.dim
            )));
        }
        match self.head {
            HeadKind::Cnn => self.cnn.validate(self.decoder.query_side, self.resolution),
            HeadKind::Mlp if !self.resolution.is_multiple_of(self.decoder.query_side) => {
                Err(ModelError::Config(format!(
                    "resolution {} is not divisible by query side {}",
                    self.resolution, self.decoder.query_side
                )))
            }
            HeadKind::Mlp => Ok(()),
        }
    }
}

/// Records every declared parameter's name and shape without allocating.
#[derive(Debug, Default)]
pub struct ShapeCollector {
    pub entries: Vec<(String, Vec<usize>, bool)>,
}

impl ParamSink for ShapeCollector {
    fn declare(&mut self, name: String, shape: &[usize], _init: Init, trainable: bool) -> ParamId {
        self.entries.push((name, shape.to_vec(), trainable));
        ParamId(self.entries.len() - 1)
    }
}

#[derive(Clone, Debug)]
enum Head {
    Cnn(Box<CnnDecoder>),
    Mlp(MlpDecoder),
}

/// Encoder, query decoder and voxel head with parameters held elsewhere.
#[derive(Clone, Debug)]
pub struct ReconModel {
    pub cfg: ModelConfig,
    encoder: Encoder,
    decoder: QueryDecoder,
    head: Head,
}

impl ReconModel {
    /// Declares every parameter in `sink`. Pretrained weights are not loaded.
    pub fn build(cfg: &ModelConfig, sink: &mut dyn ParamSink) -> Result<Self, ModelError> {
        cfg.validate()?;
        let encoder = Encoder::new(sink, &cfg.encoder);
        let decoder = QueryDecoder::new(sink, &cfg.decoder);
        let head = match cfg.head {
            HeadKind::Cnn => Head::Cnn(Box::new(CnnDecoder::new(sink, "head.cnn", cfg.decoder.dim, &cfg.cnn))),
            HeadKind::Mlp => Head::Mlp(MlpDecoder::new(
                sink,
                cfg.decoder.dim,
                cfg.decoder.query_side,
                cfg.resolution,
            )?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    /// Builds with freshly initialized parameters, importing encoder weights
    /// when the configuration asks for them.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        let mut store = ParamStore::new(seed);
        let model = Self::build(cfg, &mut store)?;
        if cfg.encoder.pretrained {
            let path = cfg.encoder.weights.as_ref().expect("validated above");
            let expected: BTreeMap<String, Vec<usize>> = store
                .entries()
                .iter()
                .filter(|e| e.name.starts_with("encoder."))
                .map(|e| (e.name.clone(), e.value.shape().to_vec()))
                .collect();
            for (name, tensor) in load_pretrained(path, &cfg.encoder, &expected)? {
                let id = store.id(&name).expect("expected names come from the store");
                store.set(id, tensor);
            }
        }
        Ok((model, store))
    }

    /// Per-view token sequences, each `[T, D]`.
    pub fn encode_views<'t>(&self, cx: &Ctx<'t>, views: &[Tensor]) -> Result<Vec<Var<'t>>, ModelError> {
        views.iter().map(|v| self.encoder.forward(cx, v)).collect()
    }

    /// Decodes pooled tokens `[T, D]` into `[R, R, R]` probabilities.
    pub fn decode<'t>(&self, cx: &Ctx<'t>, memory: &Var<'t>) -> Result<Var<'t>, ModelError> {
        let grid = self.decoder.forward(cx, memory)?;
        Ok(match &self.head {
            Head::Cnn(cnn) => cnn.forward(cx, &reshape_to_cube(&grid, self.cfg.decoder.query_side)),
            Head::Mlp(mlp) => mlp.forward(cx, &grid),
        })
    }

    /// Full pass over `1..` views of one object.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, views: &[Tensor]) -> Result<Var<'t>, ModelError> {
        if views.is_empty() {
            return Err(ModelError::Argument("at least one view is required".into()));
        }
        let seqs = self.encode_views(cx, views)?;
        self.decode(cx, &pool_view_vars(&seqs))
    }

    /// Inference without gradient recording.
    pub fn predict(&self, store: &ParamStore, views: &[Tensor]) -> Result<VoxelField, ModelError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let out = self.forward(&cx, views)?;
        let values = out.value().data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        VoxelField::new(self.cfg.resolution, values).map_err(|e| ModelError::Argument(e.to_string()))
    }

    /// Encoder output for one view as a plain feature sequence.
    pub fn encode(&self, store: &ParamStore, view: &Tensor) -> Result<FeatureSeq, ModelError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let out = self.encoder.forward(&cx, view)?;
        FeatureSeq::new(out.value().clone(), self.cfg.encoder.token_grid)
    }
}

/// Exact trainable-parameter count of the model `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    let mut counter = ParamCounter::default();
    ReconModel::build(cfg, &mut counter)?;
    Ok(counter.trainable)
}

/// Trainable-parameter count of the encoder alone.
pub fn count_encoder_params(cfg: &EncoderConfig) -> usize {
    let mut counter = ParamCounter::default();
    Encoder::new(&mut counter, cfg);
    counter.trainable
}

/// Writes `store`'s encoder parameters under archive names, the inverse of
/// the import path. Useful for producing weight files for tests and tools.
pub fn export_encoder(store: &ParamStore, variant: EncoderVariant) -> mvrecon_tensor::Archive {
    let map = crate::encoder::NameMap::for_variant(variant);
    let mut archive = mvrecon_tensor::Archive::new();
    for entry in store.entries() {
        if let Some(name) = map.archive_name(&entry.name) {
            archive.insert(name, entry.value.as_ref().clone());
        }
    }
    archive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.decoder.dim = 32;
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        let mut cfg = ModelConfig::toy();
        cfg.resolution = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn collector_and_counter_agree() {
        let cfg = ModelConfig::toy();
        let mut c = ShapeCollector::default();
        ReconModel::build(&cfg, &mut c).unwrap();
        let total: usize = c
            .entries
            .iter()
            .filter(|e| e.2)
            .map(|e| e.1.iter().product::<usize>())
            .sum();
        assert_eq!(total, count_params(&cfg).unwrap());
    }

    #[test]
    fn preset_parameter_counts() {
        let base = count_params(&ModelConfig::base()).unwrap() as f64;
        let small = count_params(&ModelConfig::small()).unwrap() as f64;
        assert!((base / 163e6 - 1.0).abs() <= 0.05);
        assert!((small / 11e6 - 1.0).abs() <= 0.10);
        let enc_base = count_encoder_params(&EncoderConfig::base()) as f64;
        let enc_tiny = count_encoder_params(&EncoderConfig::tiny()) as f64;
        assert!((enc_base / 86e6 - 1.0).abs() <= 0.05);
        assert!((enc_tiny / 5.7e6 - 1.0).abs() <= 0.05);
        let mut tiny_decoder = ModelConfig::base();
        tiny_decoder.decoder.layers = 1;
        tiny_decoder.decoder.heads = 1;
        assert!((count_params(&tiny_decoder).unwrap() as f64) < base);
    }

    #[test]
    fn toy_forward_shape_and_range() {
        let cfg = ModelConfig::toy();
        let (model, store) = ReconModel::init(&cfg, 1).unwrap();
        let s = cfg.image_size();
        let views: Vec<Tensor> = (0..2)
            .map(|k| {
                Tensor::from_vec(
                    [3, s, s],
                    (0..3 * s * s).map(|i| ((i + k * 7) as f32 * 0.01).sin()).collect(),
                )
            })
            .collect();
        let field = model.predict(&store, &views).unwrap();
        assert_eq!(field.values().len(), 32 * 32 * 32);
        assert!(field.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(model.predict(&store, &[]).is_err());
    }
}

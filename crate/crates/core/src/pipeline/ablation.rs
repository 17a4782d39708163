//! The six ablation setups as configuration deltas over an experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use mvrecon_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::eval::{evaluate, EvalReport, ModelReconstructor, Reconstructor};
use super::train::train;
use super::{mix_seed, PipelineError};
use crate::encoder::EncoderConfig;
use crate::losses::LossKind;
use crate::model::HeadKind;
use crate::voxgrid::VoxelField;
use crate::vqvae::{
    reconstruction_iou, save_stage1, teacher_forced_accuracy, train_stage1, train_stage2, CodePrior, Stage2Sample,
    VqVae,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationSetup {
    /// One decoder layer with one attention head.
    TinyDecoder = 1,
    /// Encoder trained from scratch.
    NoPretraining = 2,
    /// Residual CNN image encoder.
    Resnet50 = 3,
    /// Vector-quantized two-stage model.
    TwoStage = 4,
    /// Voxelwise binary cross-entropy instead of Dice.
    CrossEntropy = 5,
    /// One affine map per query instead of the convolutional head.
    MlpHead = 6,
}

impl AblationSetup {
    pub const ALL: [AblationSetup; 6] = [
        AblationSetup::TinyDecoder,
        AblationSetup::NoPretraining,
        AblationSetup::Resnet50,
        AblationSetup::TwoStage,
        AblationSetup::CrossEntropy,
        AblationSetup::MlpHead,
    ];

    pub fn from_id(id: u8) -> Result<Self, PipelineError> {
        Self::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| PipelineError::Argument(format!("ablation setup must be 1 to 6, got {id}")))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationSetup::TinyDecoder => "1 decoder layer, 1 head",
            AblationSetup::NoPretraining => "no encoder pretraining",
            AblationSetup::Resnet50 => "ResNet-50 encoder",
            AblationSetup::TwoStage => "VQ-VAE two-stage",
            AblationSetup::CrossEntropy => "cross-entropy loss",
            AblationSetup::MlpHead => "MLP voxel head",
        }
    }

    /// The experiment with this setup's change applied. Setup 4 leaves the
    /// configuration as is; it switches to the two-stage trainer instead.
    pub fn apply(self, base: &ExperimentConfig, resources: &AblationResources) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            AblationSetup::TinyDecoder => {
                cfg.model.decoder.layers = 1;
                cfg.model.decoder.heads = 1;
            }
            AblationSetup::NoPretraining => cfg.model.encoder.pretrained = false,
            AblationSetup::Resnet50 => {
                let mut enc = EncoderConfig::resnet50(cfg.model.encoder.dim, cfg.model.image_size());
                enc.pretrained = resources.resnet_weights.is_some();
                enc.weights = resources.resnet_weights.clone();
                cfg.model.encoder = enc;
            }
            AblationSetup::TwoStage => {}
            AblationSetup::CrossEntropy => cfg.train.loss.kind = LossKind::CrossEntropy,
            AblationSetup::MlpHead => cfg.model.head = HeadKind::Mlp,
        }
        cfg
    }
}

impl fmt::Display for AblationSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Setup {}: {}", self.id(), self.label())
    }
}

/// External files some setups need.
#[derive(Clone, Debug, Default)]
pub struct AblationResources {
    /// Residual CNN weights for setup 3; without them it starts from random
    /// initialization.
    pub resnet_weights: Option<PathBuf>,
}

/// One labeled result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setup: u8,
    pub label: String,
    pub report: EvalReport,
    /// Setup-specific diagnostics (stage metrics for setup 4).
    pub extra: BTreeMap<String, f64>,
}

impl AblationRow {
    pub fn to_markdown_line(&self) -> String {
        format!("| {} | {} | {:.4} |", self.setup, self.label, self.report.overall_iou)
    }
}

/// Stage-2 code prediction followed by stage-1 decoding.
pub struct TwoStageReconstructor<'a> {
    pub vae: &'a VqVae,
    pub vae_store: &'a ParamStore,
    pub prior: &'a CodePrior,
    pub prior_store: &'a ParamStore,
}

impl Reconstructor for TwoStageReconstructor<'_> {
    fn reconstruct(&self, _object_id: &str, views: &[Tensor]) -> Result<VoxelField, PipelineError> {
        let codes = self.prior.decode_greedy(self.prior_store, views)?;
        Ok(self.vae.vq_decode(self.vae_store, &codes)?)
    }
}

/// Trains the setup on `train_data` and evaluates it on `eval_data`.
pub fn run_ablation(
    setup: AblationSetup,
    base: &ExperimentConfig,
    resources: &AblationResources,
    train_data: &dyn Dataset,
    eval_data: &dyn Dataset,
    out_dir: Option<&Path>,
) -> Result<AblationRow, PipelineError> {
    let cfg = setup.apply(base, resources);
    let mut extra = BTreeMap::new();
    let report = if setup == AblationSetup::TwoStage {
        run_two_stage(&cfg, train_data, eval_data, out_dir, &mut extra)?
    } else {
        let outcome = train(&cfg.model, train_data, &cfg.train, out_dir)?;
        if let Some(last) = outcome.metrics.last() {
            extra.insert("final_train_loss".into(), last.loss);
            extra.insert("final_train_iou".into(), last.iou);
        }
        let t = &outcome.trainer;
        let recon = ModelReconstructor::new(&t.model, &t.store);
        evaluate(&recon, eval_data, cfg.eval.views, cfg.eval.threshold, cfg.eval.seed)?
    };
    Ok(AblationRow {
        setup: setup.id(),
        label: setup.label().to_string(),
        report,
        extra,
    })
}

fn run_two_stage(
    cfg: &ExperimentConfig,
    train_data: &dyn Dataset,
    eval_data: &dyn Dataset,
    out_dir: Option<&Path>,
    extra: &mut BTreeMap<String, f64>,
) -> Result<EvalReport, PipelineError> {
    if train_data.is_empty() {
        return Err(PipelineError::Argument("training set is empty".into()));
    }
    let seed = cfg.train.seed;
    let grids = (0..train_data.len())
        .map(|i| train_data.target(i))
        .collect::<Result<Vec<_>, _>>()?;
    let stage1 = train_stage1(&cfg.vq, &grids, seed)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        save_stage1(&dir.join("stage1.safetensors"), &stage1.vae, &stage1.store)?;
    }
    extra.insert(
        "stage1_reconstruction_iou".into(),
        reconstruction_iou(&stage1.vae, &stage1.store, &grids)?,
    );
    if let Some(last) = stage1.history.last() {
        extra.insert("stage1_dead_code_fraction".into(), last.dead_fraction);
    }

    let mut samples = Vec::with_capacity(train_data.len());
    for (i, grid) in grids.iter().enumerate() {
        let all = train_data.views_available(i);
        samples.push(Stage2Sample {
            views: train_data.views(i, all, mix_seed(seed, &[4, i as u64]))?,
            codes: stage1.vae.vq_encode(&stage1.store, grid)?,
        });
    }
    let views = cfg
        .train
        .views_per_sample
        .min(samples.iter().map(|s| s.views.len()).min().unwrap_or(1));
    let stage2 = train_stage2(&cfg.vq, &samples, views, seed)?;
    let probe: Vec<Stage2Sample> = samples
        .iter()
        .map(|s| Stage2Sample {
            views: s.views[..views].to_vec(),
            codes: s.codes.clone(),
        })
        .collect();
    extra.insert(
        "stage2_token_accuracy".into(),
        teacher_forced_accuracy(&stage2.prior, &stage2.store, &probe)?,
    );
    let recon = TwoStageReconstructor {
        vae: &stage1.vae,
        vae_store: &stage1.store,
        prior: &stage2.prior,
        prior_store: &stage2.store,
    };
    evaluate(&recon, eval_data, cfg.eval.views, cfg.eval.threshold, cfg.eval.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Preset;

    #[test]
    fn deltas_touch_only_their_fields() {
        let base = ExperimentConfig::preset(Preset::Toy);
        let res = AblationResources::default();
        let s5 = AblationSetup::CrossEntropy.apply(&base, &res);
        let mut expect = base.clone();
        expect.train.loss.kind = LossKind::CrossEntropy;
        assert_eq!(s5, expect);

        let mut pretrained = base.clone();
        pretrained.model.encoder.pretrained = true;
        pretrained.model.encoder.weights = Some("vit.safetensors".into());
        let s2 = AblationSetup::NoPretraining.apply(&pretrained, &res);
        let mut expect = pretrained.clone();
        expect.model.encoder.pretrained = false;
        assert_eq!(s2, expect);

        let s1 = AblationSetup::TinyDecoder.apply(&base, &res);
        assert_eq!((s1.model.decoder.layers, s1.model.decoder.heads), (1, 1));
        assert_eq!(AblationSetup::MlpHead.apply(&base, &res).model.head, HeadKind::Mlp);
        assert_eq!(AblationSetup::TwoStage.apply(&base, &res), base);
        let s3 = AblationSetup::Resnet50.apply(&base, &res);
        assert!(s3.model.validate().is_ok());
    }

    #[test]
    fn setup_ids_round_trip() {
        for s in AblationSetup::ALL {
            assert_eq!(AblationSetup::from_id(s.id()).unwrap(), s);
        }
        assert!(AblationSetup::from_id(0).is_err());
        assert!(AblationSetup::from_id(7).is_err());
    }
}

//! Training, checkpointing, evaluation, ablations and prediction.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod eval;
mod predict;
mod train;

pub use ablation::{run_ablation, AblationResources, AblationRow, AblationSetup, TwoStageReconstructor};
pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, DataKind, EvalConfig, ExperimentConfig, Preset};
pub use data::{Dataset, ManifestDataset, ToyDataset};
pub use eval::{
    evaluate, multi_view_cross_table, sweep, CrossTable, EvalReport, ModelReconstructor, Reconstructor, SweepTable,
    SWEEP_VIEWS,
};
pub use predict::{npy_bytes, predict, write_npy, MAX_PREDICT_VIEWS};
pub use train::{read_metrics, train, train_from, LrSchedule, MetricRecord, TrainConfig, TrainOutcome, Trainer};

use std::path::PathBuf;

use thiserror::Error;

use crate::datasets::DatasetError;
use crate::model::ModelError;
use crate::voxgrid::VoxelError;
use crate::vqvae::VqError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite loss at step {step} (batch objects {objects:?})")]
    NonFiniteLoss { step: u64, objects: Vec<String> },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Mixes a base seed with stream indices into a new 64-bit seed.
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

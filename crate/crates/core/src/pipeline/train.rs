//! The training loop and its metrics log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use mvrecon_tensor::{AdamW, AdamWConfig, Ctx, ParamStore, Tape, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::Dataset;
use super::{mix_seed, PipelineError};
use crate::datasets::MAX_VIEWS;
use crate::losses::{loss_var, LossConfig};
use crate::model::{ModelConfig, ReconModel};
use crate::voxgrid::{iou, threshold, VoxelField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over `max_steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_steps: u64,
    pub views_per_sample: usize,
    /// Round matrix-multiply operands to bfloat16. Runs are only
    /// reproducible with this off.
    pub mixed_precision: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Binarization threshold for the logged training IoU.
    pub iou_threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            batch_size: 16,
            max_steps: 1000,
            views_per_sample: 1,
            mixed_precision: false,
            seed: 0,
            loss: LossConfig::default(),
            schedule: LrSchedule::Constant,
            checkpoint_every: 0,
            iou_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be at least 1".into()));
        }
        if self.views_per_sample == 0 || self.views_per_sample > MAX_VIEWS {
            return Err(PipelineError::Config(format!(
                "views_per_sample must be in 1..={MAX_VIEWS}"
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config(
                "learning_rate must be a non-negative number".into(),
            ));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(PipelineError::Config("iou_threshold must lie in (0, 1)".into()));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.max_steps.max(1) as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub iou: f64,
}

/// Reads a metrics log, skipping a trailing partial line left by a crash.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(PipelineError::Argument(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Model, parameters and optimizer state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ReconModel,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    pub train_cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self, PipelineError> {
        train_cfg.validate()?;
        let (model, store) = ReconModel::init(model_cfg, train_cfg.seed)?;
        let optimizer = AdamW::new(train_cfg.optimizer(), store.len());
        Ok(Self {
            model,
            store,
            optimizer,
            step: 0,
            train_cfg: train_cfg.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            model: ckpt.model,
            store: ckpt.store,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            train_cfg: ckpt.train_cfg,
        }
    }

    /// Objects in the batch for 0-based step `step`.
    fn batch(&self, len: usize, step: u64) -> Vec<usize> {
        let cfg = &self.train_cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[1, step]));
        let mut picks = sample(&mut rng, len, cfg.batch_size.min(len)).into_vec();
        picks.sort_unstable();
        picks
    }

    /// Runs one optimization step and returns its metrics.
    pub fn step(&mut self, data: &dyn Dataset) -> Result<MetricRecord, PipelineError> {
        if data.is_empty() {
            return Err(PipelineError::Argument("training set is empty".into()));
        }
        let cfg = self.train_cfg.clone();
        let step = self.step;
        let batch = self.batch(data.len(), step);
        let scale = 1.0 / batch.len() as f32;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let (mut loss_sum, mut iou_sum) = (0.0f64, 0.0f64);
        for &i in &batch {
            let views = data.views(i, cfg.views_per_sample, mix_seed(cfg.seed, &[2, step, i as u64]))?;
            let target = data.target(i)?;
            let tape = Tape::new();
            tape.set_low_precision(cfg.mixed_precision);
            let cx = Ctx::new(&tape, &self.store, true);
            let out = self.model.forward(&cx, &views)?;
            let target_t = Tensor::from_vec([target.occupancy().len()], target.to_f32());
            let loss = loss_var(&out, &target_t, &cfg.loss);
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    step: step + 1,
                    objects: batch.iter().map(|&j| data.object_id(j).to_string()).collect(),
                });
            }
            loss_sum += value;
            let field = VoxelField::new(
                target.resolution(),
                out.value().data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            )?;
            iou_sum += iou(&threshold(&field, cfg.iou_threshold)?, &target)?;
            let mut sample_grads = tape.backward(&loss.scale(scale));
            for (acc, g) in grads.iter_mut().zip(cx.param_grads(&mut sample_grads)) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        self.optimizer.step(&mut self.store, &grads, cfg.lr_at(step));
        self.step += 1;
        let n = batch.len() as f64;
        Ok(MetricRecord {
            step: self.step,
            loss: loss_sum / n,
            iou: iou_sum / n,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            train_cfg: self.train_cfg.clone(),
        }
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains for `train_cfg.max_steps` steps.
///
/// With an output directory, every step appends a line to
/// `metrics.ndjson` and checkpoints are written as
/// `step-NNNNNN.safetensors` plus a final `final.safetensors`.
pub fn train(
    model_cfg: &ModelConfig,
    data: &dyn Dataset,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    train_from(Trainer::new(model_cfg, train_cfg)?, data, out_dir)
}

/// Continues `trainer` up to `trainer.train_cfg.max_steps`.
///
/// When resuming into an output directory, metric lines past the
/// trainer's step are dropped first, so the log matches an uninterrupted run.
pub fn train_from(
    mut trainer: Trainer,
    data: &dyn Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    let train_cfg = trainer.train_cfg.clone();
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
            let path = dir.join("metrics.ndjson");
            let mut kept = String::new();
            if trainer.step > 0 && path.exists() {
                for rec in read_metrics(&path)?.iter().filter(|r| r.step <= trainer.step) {
                    kept += &(serde_json::to_string(rec).expect("metric record serializes") + "\n");
                }
            }
            fs::write(&path, kept).map_err(|e| PipelineError::io(&path, e))?;
            let file = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| PipelineError::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(train_cfg.max_steps as usize);
    let mut checkpoints = Vec::new();
    while trainer.step < train_cfg.max_steps {
        let rec = trainer.step(data)?;
        if let Some((path, file)) = log.as_mut() {
            let line = serde_json::to_string(&rec).expect("metric record serializes") + "\n";
            file.write_all(line.as_bytes())
                .map_err(|e| PipelineError::io(&*path, e))?;
        }
        metrics.push(rec);
        if let Some(dir) = out_dir {
            let every = train_cfg.checkpoint_every;
            if every > 0 && trainer.step.is_multiple_of(every) && trainer.step < train_cfg.max_steps {
                let path = dir.join(format!("step-{:06}.safetensors", trainer.step));
                save_checkpoint(&path, &trainer.checkpoint())?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.safetensors");
        save_checkpoint(&path, &trainer.checkpoint())?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        trainer,
        metrics,
        checkpoints,
    })
}

//! Crash-safe checkpoints holding parameters, optimizer moments and configs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mvrecon_tensor::{AdamW, Archive, ParamStore};

use super::train::TrainConfig;
use super::PipelineError;
use crate::model::{ModelConfig, ReconModel};

const FORMAT: &str = "mvrecon-checkpoint/1";

/// Everything needed to resume a run or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ReconModel,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Completed optimization steps.
    pub step: u64,
    pub train_cfg: TrainConfig,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn to_archive(ckpt: &Checkpoint) -> Archive {
    let mut archive = Archive::new();
    for (i, entry) in ckpt.store.entries().iter().enumerate() {
        archive.insert(format!("model.{}", entry.name), entry.value.as_ref().clone());
        if let Some(m) = ckpt.optimizer.first.get(i).and_then(Option::as_ref) {
            archive.insert(format!("optim.m.{}", entry.name), m.clone());
        }
        if let Some(v) = ckpt.optimizer.second.get(i).and_then(Option::as_ref) {
            archive.insert(format!("optim.v.{}", entry.name), v.clone());
        }
    }
    let meta = &mut archive.metadata;
    meta.insert("format".into(), FORMAT.into());
    meta.insert("step".into(), ckpt.step.to_string());
    meta.insert("optim_step".into(), ckpt.optimizer.step.to_string());
    meta.insert(
        "model_config".into(),
        serde_json::to_string(&ckpt.model.cfg).expect("model config serializes"),
    );
    meta.insert(
        "train_config".into(),
        serde_json::to_string(&ckpt.train_cfg).expect("train config serializes"),
    );
    archive
}

/// Writes `ckpt` to `path` through [`write_atomic`].
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    write_atomic(path, &to_archive(ckpt).to_bytes()).map_err(|e| PipelineError::io(path, e))
}

/// Writes through a temporary sibling file and a rename, so a crash never
/// leaves a truncated file under the final name. The temporary file is
/// removed on failure.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn meta<'a>(archive: &'a Archive, path: &Path, key: &str) -> Result<&'a str, PipelineError> {
    archive
        .metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| ckpt_err(path, format!("missing metadata key {key:?}")))
}

/// Reads a checkpoint and rebuilds its model.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let archive = Archive::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let format = meta(&archive, path, "format")?;
    if format != FORMAT {
        return Err(ckpt_err(path, format!("unsupported format {format:?}")));
    }
    let step: u64 = meta(&archive, path, "step")?
        .parse()
        .map_err(|_| ckpt_err(path, "bad step"))?;
    let optim_step: u64 = meta(&archive, path, "optim_step")?
        .parse()
        .map_err(|_| ckpt_err(path, "bad optimizer step"))?;
    let mut model_cfg: ModelConfig = serde_json::from_str(meta(&archive, path, "model_config")?)
        .map_err(|e| ckpt_err(path, format!("model config: {e}")))?;
    let train_cfg: TrainConfig = serde_json::from_str(meta(&archive, path, "train_config")?)
        .map_err(|e| ckpt_err(path, format!("train config: {e}")))?;

    // Weights come from the archive, so the original import file is not needed.
    model_cfg.encoder.pretrained = false;
    model_cfg.encoder.weights = None;
    let mut store = ParamStore::new(0);
    let model = ReconModel::build(&model_cfg, &mut store)?;
    let mut optimizer = AdamW::new(train_cfg.optimizer(), store.len());
    optimizer.step = optim_step;
    let ids: Vec<_> = store
        .iter()
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let fetch = |prefix: &str| -> Result<Option<mvrecon_tensor::Tensor>, PipelineError> {
            match archive.get(&format!("{prefix}{name}")) {
                None => Ok(None),
                Some(t) if t.shape() == shape.as_slice() => Ok(Some(t.clone())),
                Some(t) => Err(ckpt_err(
                    path,
                    format!("{prefix}{name} has shape {:?}, expected {shape:?}", t.shape()),
                )),
            }
        };
        let value = fetch("model.")?.ok_or_else(|| ckpt_err(path, format!("missing tensor model.{name}")))?;
        store.set(id, value);
        optimizer.first[id.0] = fetch("optim.m.")?;
        optimizer.second[id.0] = fetch("optim.v.")?;
    }
    Ok(Checkpoint {
        model,
        store,
        optimizer,
        step,
        train_cfg,
    })
}

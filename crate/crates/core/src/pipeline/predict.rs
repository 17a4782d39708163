//! Images in, binvox (and optionally a raw probability array) out.

use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::PipelineError;
use crate::datasets::{preprocess_image, PreprocessConfig, RawImage};
use crate::voxgrid::{threshold as binarize, write_binvox, VoxelField};

/// Upper bound on input images per prediction.
pub const MAX_PREDICT_VIEWS: usize = 20;

/// Reconstructs one object from `images`, writes the thresholded grid to
/// `out` and, when `npy` is given, the probability field as float32 `.npy`.
pub fn predict(
    ckpt: &Checkpoint,
    images: &[PathBuf],
    threshold: f32,
    preprocess: &PreprocessConfig,
    out: &Path,
    npy: Option<&Path>,
) -> Result<VoxelField, PipelineError> {
    if images.is_empty() || images.len() > MAX_PREDICT_VIEWS {
        return Err(PipelineError::Argument(format!(
            "expected 1 to {MAX_PREDICT_VIEWS} images, got {}",
            images.len()
        )));
    }
    if preprocess.target_size != ckpt.model.cfg.image_size() {
        return Err(PipelineError::Argument(format!(
            "preprocess size {} does not match model input size {}",
            preprocess.target_size,
            ckpt.model.cfg.image_size()
        )));
    }
    let views = images
        .iter()
        .map(|p| RawImage::load(p).and_then(|raw| preprocess_image(&raw, preprocess)))
        .collect::<Result<Vec<_>, _>>()?;
    let field = ckpt.model.predict(&ckpt.store, &views)?;
    let grid = binarize(&field, threshold)?;
    fs::write(out, write_binvox(&grid)).map_err(|e| PipelineError::io(out, e))?;
    if let Some(path) = npy {
        write_npy(path, &field)?;
    }
    Ok(field)
}

/// Encodes `field` as a version 1.0 `.npy` array of shape `(R, R, R)`.
pub fn npy_bytes(field: &VoxelField) -> Vec<u8> {
    let r = field.resolution();
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({r}, {r}, {r}), }}");
    // Magic, version and length take 10 bytes; the header ends in a newline
    // and pads the data start to a multiple of 64.
    let total = (10 + header.len() + 1).div_ceil(64) * 64;
    header.push_str(&" ".repeat(total - 10 - header.len() - 1));
    header.push('\n');
    let mut out = Vec::with_capacity(total + 4 * field.values().len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_npy(path: &Path, field: &VoxelField) -> Result<(), PipelineError> {
    fs::write(path, npy_bytes(field)).map_err(|e| PipelineError::io(path, e))
}

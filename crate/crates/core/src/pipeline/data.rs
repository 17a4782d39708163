//! Uniform access to toy and on-disk datasets.

use mvrecon_tensor::Tensor;

use crate::datasets::{sample_view_indices, sample_views, DatasetError, PreprocessConfig, SampleRecord, ToySample};
use crate::voxgrid::VoxelGrid;

/// Indexed objects with views and ground-truth voxels.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn object_id(&self, index: usize) -> &str;

    fn category(&self, index: usize) -> &str;

    fn views_available(&self, index: usize) -> usize;

    /// `v` preprocessed views chosen without replacement, fixed by `seed`.
    fn views(&self, index: usize, v: usize, seed: u64) -> Result<Vec<Tensor>, DatasetError>;

    fn target(&self, index: usize) -> Result<VoxelGrid, DatasetError>;
}

/// In-memory procedural samples.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn new(samples: Vec<ToySample>) -> Self {
        Self { samples }
    }
}

impl Dataset for ToyDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn object_id(&self, index: usize) -> &str {
        &self.samples[index].views.object_id
    }

    fn category(&self, index: usize) -> &str {
        &self.samples[index].views.category
    }

    fn views_available(&self, index: usize) -> usize {
        self.samples[index].views.images.len()
    }

    fn views(&self, index: usize, v: usize, seed: u64) -> Result<Vec<Tensor>, DatasetError> {
        let images = &self.samples[index].views.images;
        Ok(sample_view_indices(images.len(), v, seed)?
            .into_iter()
            .map(|i| images[i].clone())
            .collect())
    }

    fn target(&self, index: usize) -> Result<VoxelGrid, DatasetError> {
        Ok(self.samples[index].grid.clone())
    }
}

/// Records from a manifest, loaded from disk on demand.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    pub records: Vec<SampleRecord>,
    pub preprocess: PreprocessConfig,
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn object_id(&self, index: usize) -> &str {
        &self.records[index].object_id
    }

    fn category(&self, index: usize) -> &str {
        &self.records[index].category
    }

    fn views_available(&self, index: usize) -> usize {
        self.records[index].view_paths.len()
    }

    fn views(&self, index: usize, v: usize, seed: u64) -> Result<Vec<Tensor>, DatasetError> {
        Ok(sample_views(&self.records[index], v, seed, &self.preprocess)?.images)
    }

    fn target(&self, index: usize) -> Result<VoxelGrid, DatasetError> {
        self.records[index].load_voxels()
    }
}

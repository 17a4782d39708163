//! Dataset manifests, image preprocessing, view sampling and the procedural
//! toy dataset.
//!
//! ShapeNet-style layout:
//!
//! ```text
//! root/<category>/<object_id>/rendering/*.png
//! root/<category>/<object_id>/model.binvox
//! root/splits/{train,val,test}.txt      one object id per line
//! ```
//!
//! Pix3D-style layout: `root/pix3d.json`, a list of annotation objects with
//! `img`, `voxel`, `category`, `truncated` and `occluded` keys; paths are
//! relative to `root`.

use std::fs;
use std::path::{Path, PathBuf};

use mvrecon_tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxgrid::{read_binvox, write_binvox, VoxelError, VoxelGrid};

/// Upper bound on views per object.
pub const MAX_VIEWS: usize = 24;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest error for {object}: {reason}")]
    Manifest { object: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("voxel file {path}: {source}")]
    Voxel {
        path: PathBuf,
        #[source]
        source: VoxelError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub object_id: String,
    pub category: String,
    pub view_paths: Vec<PathBuf>,
    pub voxel_path: PathBuf,
}

impl SampleRecord {
    pub fn load_voxels(&self) -> Result<VoxelGrid, DatasetError> {
        let bytes = fs::read(&self.voxel_path).map_err(|source| DatasetError::Io {
            path: self.voxel_path.clone(),
            source,
        })?;
        read_binvox(&bytes).map_err(|source| DatasetError::Voxel {
            path: self.voxel_path.clone(),
            source,
        })
    }
}

/// Preprocessed views of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    /// Each `[3, S, S]`.
    pub images: Vec<Tensor>,
    pub object_id: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
    /// RGB in `[0, 1]` placed behind transparent pixels.
    pub background_fill: [f32; 3],
}

impl Default for PreprocessConfig {
    /// 224-pixel output with the ImageNet statistics pretrained encoders use.
    fn default() -> Self {
        Self {
            target_size: 224,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
            background_fill: [1.0, 1.0, 1.0],
        }
    }
}

impl PreprocessConfig {
    pub fn with_size(target_size: usize) -> Self {
        Self {
            target_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.target_size == 0 || self.channel_stds.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(DatasetError::Argument(
                "target size and channel deviations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decoded image, row-major `H × W × channels` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => DatasetError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => DatasetError::Image {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })?;
        let (channels, data): (usize, Vec<f32>) = if img.color().has_alpha() {
            (4, img.to_rgba32f().into_raw())
        } else {
            (3, img.to_rgb32f().into_raw())
        };
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels,
            data,
        })
    }
}

/// Alpha-composites, bilinearly resizes to `S × S` and normalizes per channel.
pub fn preprocess_image(raw: &RawImage, cfg: &PreprocessConfig) -> Result<Tensor, DatasetError> {
    cfg.validate()?;
    let (w, h, ch) = (raw.width, raw.height, raw.channels);
    if w == 0 || h == 0 {
        return Err(DatasetError::Argument("image has zero area".into()));
    }
    if ch != 3 && ch != 4 {
        return Err(DatasetError::Argument(format!("expected 3 or 4 channels, got {ch}")));
    }
    if raw.data.len() != w * h * ch {
        return Err(DatasetError::Argument("pixel buffer does not match dimensions".into()));
    }
    // Planar RGB after compositing.
    let mut rgb = vec![0.0f32; 3 * w * h];
    for p in 0..w * h {
        let px = &raw.data[p * ch..(p + 1) * ch];
        let alpha = if ch == 4 { px[3] } else { 1.0 };
        for c in 0..3 {
            rgb[c * w * h + p] = px[c] * alpha + cfg.background_fill[c] * (1.0 - alpha);
        }
    }
    let s = cfg.target_size;
    // Half-pixel-centred sampling positions, clamped at the borders.
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
                let lo = (x.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let (rows, cols) = (taps(s, h), taps(s, w));
    let mut out = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        let plane = &rgb[c * w * h..(c + 1) * w * h];
        let (mean, std) = (cfg.channel_means[c], cfg.channel_stds[c]);
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bottom = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                let v = top * (1.0 - fr) + bottom * fr;
                out.push((v - mean) / std);
            }
        }
    }
    Ok(Tensor::from_vec([3, s, s], out))
}

/// `v` distinct indices out of `available`, deterministic in `seed`.
pub fn sample_view_indices(available: usize, v: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    if v == 0 || v > available {
        return Err(DatasetError::Argument(format!(
            "cannot sample {v} views from {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, available, v).into_vec())
}

/// Loads and preprocesses `v` views of `record` chosen without replacement.
pub fn sample_views(
    record: &SampleRecord,
    v: usize,
    seed: u64,
    cfg: &PreprocessConfig,
) -> Result<ViewSet, DatasetError> {
    let picks = sample_view_indices(record.view_paths.len(), v, seed)?;
    let images = picks
        .iter()
        .map(|&i| preprocess_image(&RawImage::load(&record.view_paths[i])?, cfg))
        .collect::<Result<_, _>>()?;
    Ok(ViewSet {
        images,
        object_id: record.object_id.clone(),
        category: record.category.clone(),
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        paths.push(entry.path());
    }
    paths.sort();
    Ok(paths)
}

/// Records for one split of a ShapeNet-style tree, sorted by category then id.
pub fn load_shapenet_manifest(root: &Path, split: Split) -> Result<Vec<SampleRecord>, DatasetError> {
    let split_file = root.join("splits").join(format!("{}.txt", split.name()));
    load_shapenet_manifest_from(root, &split_file)
}

/// As [`load_shapenet_manifest`] with an explicit split file.
pub fn load_shapenet_manifest_from(root: &Path, split_file: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let text = fs::read_to_string(split_file).map_err(|source| DatasetError::Io {
        path: split_file.to_path_buf(),
        source,
    })?;
    let wanted: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    // Object id → category directory.
    let mut owner = std::collections::HashMap::new();
    for cat_dir in read_dir_sorted(root)? {
        if !cat_dir.is_dir() || cat_dir.file_name().is_some_and(|n| n == "splits") {
            continue;
        }
        let category = cat_dir.file_name().unwrap().to_string_lossy().into_owned();
        for obj_dir in read_dir_sorted(&cat_dir)? {
            if obj_dir.is_dir() {
                let id = obj_dir.file_name().unwrap().to_string_lossy().into_owned();
                owner.insert(id, category.clone());
            }
        }
    }
    let mut records = Vec::with_capacity(wanted.len());
    for id in wanted {
        let missing = |reason: &str| DatasetError::Manifest {
            object: id.to_string(),
            reason: reason.to_string(),
        };
        let category = owner.get(id).ok_or_else(|| missing("no object directory"))?;
        let obj = root.join(category).join(id);
        let voxel_path = obj.join("model.binvox");
        if !voxel_path.is_file() {
            return Err(missing("model.binvox not found"));
        }
        let rendering = obj.join("rendering");
        let view_paths: Vec<PathBuf> = if rendering.is_dir() {
            read_dir_sorted(&rendering)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect()
        } else {
            Vec::new()
        };
        if view_paths.is_empty() {
            return Err(missing("no rendered views"));
        }
        records.push(SampleRecord {
            object_id: id.to_string(),
            category: category.clone(),
            view_paths,
            voxel_path,
        });
    }
    records.sort_by(|a, b| (&a.category, &a.object_id).cmp(&(&b.category, &b.object_id)));
    Ok(records)
}

#[derive(Deserialize)]
struct Pix3dEntry {
    img: String,
    voxel: String,
    category: String,
    #[serde(default)]
    truncated: bool,
    #[serde(default)]
    occluded: bool,
}

/// Untruncated, unoccluded chair images from a Pix3D-style annotation file,
/// one view each, sorted by object id.
pub fn load_pix3d_manifest(root: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let path = root.join("pix3d.json");
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::Manifest {
        object: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let entries: Vec<Pix3dEntry> = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        object: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut records: Vec<SampleRecord> = entries
        .into_iter()
        .filter(|e| e.category == "chair" && !e.truncated && !e.occluded)
        .map(|e| SampleRecord {
            object_id: e.img.clone(),
            category: e.category,
            view_paths: vec![root.join(&e.img)],
            voxel_path: root.join(&e.voxel),
        })
        .collect();
    records.sort_by(|a, b| a.object_id.cmp(&b.object_id));
    Ok(records)
}

/// Parameters of the procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Rendered views per object, at most [`MAX_VIEWS`].
    pub views: usize,
    /// Render side in pixels.
    pub image_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            resolution: 32,
            views: 4,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub views: ViewSet,
    pub grid: VoxelGrid,
}

pub const TOY_CATEGORIES: [&str; 3] = ["cuboid", "sphere", "lshape"];

/// `n` toy objects of `resolution³` voxels with four orthographic views each.
pub fn make_toy_dataset(n: usize, seed: u64, resolution: usize) -> Vec<ToySample> {
    make_toy_dataset_with(&ToyConfig {
        count: n,
        seed,
        resolution,
        image_size: resolution,
        ..ToyConfig::default()
    })
    .expect("default toy view count is valid")
}

pub fn make_toy_dataset_with(cfg: &ToyConfig) -> Result<Vec<ToySample>, DatasetError> {
    if cfg.count == 0 || cfg.resolution < 4 || cfg.image_size == 0 {
        return Err(DatasetError::Argument(
            "toy data needs at least one object, resolution ≥ 4 and a positive image size".into(),
        ));
    }
    if cfg.views == 0 || cfg.views > MAX_VIEWS {
        return Err(DatasetError::Argument(format!(
            "toy views must be in 1..={MAX_VIEWS}, got {}",
            cfg.views
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pre = PreprocessConfig::with_size(cfg.image_size);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let kind = i % TOY_CATEGORIES.len();
        let grid = toy_shape(kind, cfg.resolution, &mut rng);
        let images = (0..cfg.views)
            .map(|v| {
                let mask = render_silhouette(&grid, v, cfg.image_size);
                preprocess_image(&silhouette_image(&mask, cfg.image_size), &pre)
            })
            .collect::<Result<_, _>>()?;
        out.push(ToySample {
            views: ViewSet {
                images,
                object_id: format!("toy-{i:04}"),
                category: TOY_CATEGORIES[kind].to_string(),
            },
            grid,
        });
    }
    Ok(out)
}

/// Writes the toy objects as a ShapeNet-style tree under `root`: PNG
/// silhouettes, `model.binvox` grids and `train`/`val`/`test` split files
/// that each list every object.
pub fn write_toy_shapenet(root: &Path, cfg: &ToyConfig) -> Result<Vec<SampleRecord>, DatasetError> {
    let samples = make_toy_dataset_with(cfg)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let obj = root.join(&s.views.category).join(&s.views.object_id);
        let rendering = obj.join("rendering");
        fs::create_dir_all(&rendering).map_err(io(&rendering))?;
        let mut view_paths = Vec::with_capacity(cfg.views);
        for v in 0..cfg.views {
            let mask = render_silhouette(&s.grid, v, cfg.image_size);
            let size = cfg.image_size as u32;
            let img = image::GrayImage::from_fn(size, size, |x, y| {
                image::Luma([if mask[(y * size + x) as usize] { 0 } else { 255 }])
            });
            let path = rendering.join(format!("{v:02}.png"));
            img.save(&path).map_err(|e| DatasetError::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            view_paths.push(path);
        }
        let voxel_path = obj.join("model.binvox");
        fs::write(&voxel_path, write_binvox(&s.grid)).map_err(io(&voxel_path))?;
        records.push(SampleRecord {
            object_id: s.views.object_id.clone(),
            category: s.views.category.clone(),
            view_paths,
            voxel_path,
        });
    }
    let splits = root.join("splits");
    fs::create_dir_all(&splits).map_err(io(&splits))?;
    let ids: String = samples.iter().map(|s| format!("{}\n", s.views.object_id)).collect();
    for split in [Split::Train, Split::Val, Split::Test] {
        let path = splits.join(format!("{}.txt", split.name()));
        fs::write(&path, &ids).map_err(io(&path))?;
    }
    records.sort_by(|a, b| (&a.category, &a.object_id).cmp(&(&b.category, &b.object_id)));
    Ok(records)
}

fn fill_box(g: &mut VoxelGrid, lo: [usize; 3], hi: [usize; 3]) {
    for x in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for z in lo[2]..hi[2] {
                g.set(x, y, z, true);
            }
        }
    }
}

fn toy_shape(kind: usize, n: usize, rng: &mut ChaCha8Rng) -> VoxelGrid {
    let mut g = VoxelGrid::empty(n);
    let span = |rng: &mut ChaCha8Rng, min: usize, max: usize| -> (usize, usize) {
        let len = rng.random_range(min..=max);
        let start = rng.random_range(0..=n - len);
        (start, start + len)
    };
    match kind {
        0 => {
            let (a, b, c) = (
                span(rng, n / 4, 3 * n / 4),
                span(rng, n / 4, 3 * n / 4),
                span(rng, n / 4, 3 * n / 4),
            );
            fill_box(&mut g, [a.0, b.0, c.0], [a.1, b.1, c.1]);
        }
        1 => {
            let r = rng.random_range(n as f64 / 5.0..n as f64 / 2.5);
            let lo = r.ceil();
            let hi = n as f64 - r.ceil();
            let center: Vec<f64> = (0..3).map(|_| rng.random_range(lo..=hi.max(lo))).collect();
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        let d2 = [x, y, z]
                            .iter()
                            .zip(&center)
                            .map(|(&p, c)| (p as f64 + 0.5 - c).powi(2))
                            .sum::<f64>();
                        if d2 <= r * r {
                            g.set(x, y, z, true);
                        }
                    }
                }
            }
        }
        _ => {
            // A horizontal slab with an upright bar standing on one end.
            let (x0, x1) = span(rng, n / 2, 3 * n / 4);
            let (z0, z1) = span(rng, n / 4, n / 2);
            let y0 = rng.random_range(0..n / 4);
            let thick = rng.random_range(n / 8..=n / 4).max(1);
            let height = rng.random_range(n / 2..=3 * n / 4).min(n - y0);
            fill_box(&mut g, [x0, y0, z0], [x1, y0 + thick, z1]);
            fill_box(&mut g, [x0, y0, z0], [x0 + thick.min(x1 - x0), y0 + height, z1]);
        }
    }
    g
}

/// Orthographic silhouette (`true` = occupied) of view `view` at `size²`.
///
/// Views enumerate six viewing directions (+x, +y, +z, -x, -y, -z) and then
/// four in-plane quarter turns, so every view is an exact max-projection.
/// For the `+a` direction, image row/column index the remaining two axes in
/// increasing order; `-a` mirrors the column.
pub fn render_silhouette(grid: &VoxelGrid, view: usize, size: usize) -> Vec<bool> {
    let n = grid.resolution();
    let (axis, mirrored, turns) = (view % 3, (view / 3) % 2 == 1, view / 6);
    let mut proj = vec![false; n * n];
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if grid.get(x, y, z) {
                    let (u, v) = match axis {
                        0 => (y, z),
                        1 => (x, z),
                        _ => (x, y),
                    };
                    proj[u * n + v] = true;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (mut i, mut j) = (r * n / size, c * n / size);
            for _ in 0..turns {
                (i, j) = (j, n - 1 - i);
            }
            if mirrored {
                j = n - 1 - j;
            }
            out.push(proj[i * n + j]);
        }
    }
    out
}

/// Black object on a white background.
pub fn silhouette_image(mask: &[bool], size: usize) -> RawImage {
    let mut data = Vec::with_capacity(size * size * 3);
    for &m in mask {
        let v = if m { 0.0 } else { 1.0 };
        data.extend_from_slice(&[v, v, v]);
    }
    RawImage {
        width: size,
        height: size,
        channels: 3,
        data,
    }
}

//! Training, checkpointing, evaluation and prediction on toy data.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use mvrecon_core::datasets::{make_toy_dataset_with, render_silhouette, silhouette_image, PreprocessConfig, ToyConfig};
use mvrecon_core::pipeline::{
    evaluate, load_checkpoint, multi_view_cross_table, predict, read_metrics, save_checkpoint, sweep, train,
    train_from, Dataset, ExperimentConfig, ModelReconstructor, PipelineError, Preset, Reconstructor, ToyDataset,
    Trainer, MAX_PREDICT_VIEWS,
};
use mvrecon_core::voxgrid::{read_binvox, VoxelField, VoxelGrid};
use mvrecon_tensor::Tensor;

fn quick_experiment() -> ExperimentConfig {
    let mut exp = ExperimentConfig::preset(Preset::Toy);
    exp.data.toy.count = 4;
    exp.train.batch_size = 2;
    exp.train.max_steps = 3;
    exp
}

fn toy(exp: &ExperimentConfig) -> ToyDataset {
    ToyDataset::new(make_toy_dataset_with(&exp.data.toy).unwrap())
}

/// Returns each object's ground truth regardless of the views.
struct Oracle(HashMap<String, VoxelGrid>);

impl Oracle {
    fn new(data: &dyn Dataset) -> Self {
        Self(
            (0..data.len())
                .map(|i| (data.object_id(i).to_string(), data.target(i).unwrap()))
                .collect(),
        )
    }
}

impl Reconstructor for Oracle {
    fn reconstruct(&self, object_id: &str, _views: &[Tensor]) -> Result<VoxelField, PipelineError> {
        let g = &self.0[object_id];
        Ok(VoxelField::new(g.resolution(), g.to_f32())?)
    }
}

#[test]
fn oracle_reconstructor_scores_one() {
    let exp = ExperimentConfig::preset(Preset::Toy);
    let data = toy(&exp);
    let report = evaluate(&Oracle::new(&data), &data, 2, 0.5, 7).unwrap();
    assert_eq!(report.overall_iou, 1.0);
    assert_eq!(report.per_example_iou, 1.0);
    assert_eq!(report.sample_count, data.len());
    assert_eq!(report.views_used, 2);
}

#[test]
fn overall_iou_is_the_category_mean() {
    let exp = quick_experiment();
    let data = toy(&exp);
    let (model, store) = mvrecon_core::model::ReconModel::init(&exp.model, 3).unwrap();
    let report = evaluate(&ModelReconstructor::new(&model, &store), &data, 1, 0.5, 1).unwrap();
    let mean = report.per_category_iou.values().sum::<f64>() / report.per_category_iou.len() as f64;
    assert!((report.overall_iou - mean).abs() <= 1e-12);

    let single = ToyDataset::new(data.samples[..1].to_vec());
    let report = evaluate(&Oracle::new(&single), &single, 1, 0.5, 1).unwrap();
    assert_eq!(report.per_category_iou.len(), 1);
    assert_eq!(report.overall_iou, *report.per_category_iou.values().next().unwrap());
}

#[test]
fn empty_split_and_excess_views_are_argument_errors() {
    let exp = quick_experiment();
    let data = toy(&exp);
    let empty = ToyDataset::new(Vec::new());
    assert!(matches!(
        evaluate(&Oracle::new(&data), &empty, 1, 0.5, 1),
        Err(PipelineError::Argument(_))
    ));
    assert!(evaluate(&Oracle::new(&data), &data, exp.data.toy.views + 1, 0.5, 1).is_err());
}

#[test]
fn sweep_emits_one_report_per_view_count() {
    let exp = quick_experiment();
    let data = toy(&exp);
    let table = sweep(&Oracle::new(&data), &data, &[1, 2, 3], 0.5, 1).unwrap();
    assert_eq!(
        table.reports.iter().map(|r| r.views_used).collect::<Vec<_>>(),
        [1, 2, 3]
    );
    let csv = table.to_csv();
    let categories = table.reports[0].per_category_iou.len();
    assert_eq!(csv.lines().count(), 1 + 3 * (categories + 1));
    assert!(table.to_markdown().contains("overall"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let exp = quick_experiment();
    let data = toy(&exp);
    let mut straight = Trainer::new(&exp.model, &exp.train).unwrap();
    let full: Vec<_> = (0..3).map(|_| straight.step(&data).unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.safetensors");
    let mut first = Trainer::new(&exp.model, &exp.train).unwrap();
    let mut resumed_metrics = vec![first.step(&data).unwrap()];
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap());
    assert_eq!(resumed.step, 1);
    resumed_metrics.push(resumed.step(&data).unwrap());
    resumed_metrics.push(resumed.step(&data).unwrap());
    assert_eq!(resumed_metrics, full);
    for ((_, a), (_, b)) in straight.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn resuming_into_a_run_directory_reproduces_its_files() {
    let mut exp = quick_experiment();
    exp.train.max_steps = 4;
    exp.train.checkpoint_every = 2;
    let data = toy(&exp);
    let straight = tempfile::tempdir().unwrap();
    train(&exp.model, &data, &exp.train, Some(straight.path())).unwrap();

    // Simulate a crash after step 3: metrics ran past the last checkpoint.
    let crashed = tempfile::tempdir().unwrap();
    let mut short = exp.train.clone();
    short.max_steps = 3;
    train(&exp.model, &data, &short, Some(crashed.path())).unwrap();
    fs::remove_file(crashed.path().join("final.safetensors")).unwrap();
    assert_eq!(read_metrics(&crashed.path().join("metrics.ndjson")).unwrap().len(), 3);

    let mut resumed =
        Trainer::from_checkpoint(load_checkpoint(&crashed.path().join("step-000002.safetensors")).unwrap());
    resumed.train_cfg.max_steps = 4;
    train_from(resumed, &data, Some(crashed.path())).unwrap();
    for name in ["metrics.ndjson", "final.safetensors"] {
        assert_eq!(
            fs::read(straight.path().join(name)).unwrap(),
            fs::read(crashed.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut exp = quick_experiment();
    exp.train.learning_rate = 0.0;
    exp.train.max_steps = 2;
    let data = toy(&exp);
    let fresh = Trainer::new(&exp.model, &exp.train).unwrap();
    let outcome = train(&exp.model, &data, &exp.train, None).unwrap();
    for ((_, a), (_, b)) in fresh.store.iter().zip(outcome.trainer.store.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let mut exp = quick_experiment();
    exp.train.checkpoint_every = 2;
    let data = toy(&exp);
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&exp.model, &data, &exp.train, Some(dir.path())).unwrap();
    let names: Vec<String> = outcome
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-000002.safetensors", "final.safetensors"]);
    let metrics = read_metrics(&dir.path().join("metrics.ndjson")).unwrap();
    assert_eq!(metrics, outcome.metrics);
    assert_eq!(metrics.iter().map(|m| m.step).collect::<Vec<_>>(), [1, 2, 3]);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp-"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn metrics_tolerate_a_partial_final_line_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.ndjson");
    fs::write(
        &path,
        "{\"step\":1,\"loss\":0.5,\"iou\":0.1}\n{\"step\":2,\"loss\":0.4,\"iou\":0.2}\n{\"step\":3,\"lo",
    )
    .unwrap();
    let records = read_metrics(&path).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1].step, 2);

    fs::write(
        &path,
        "{\"step\":1,\"loss\":0.5,\"iou\":0.1}\ngarbage\n{\"step\":3,\"loss\":0.1,\"iou\":0.3}\n",
    )
    .unwrap();
    assert!(read_metrics(&path).is_err());

    // A new run appends to a fresh file.
    let mut exp = quick_experiment();
    exp.train.max_steps = 1;
    let data = toy(&exp);
    fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"stale")
        .unwrap();
    train(&exp.model, &data, &exp.train, Some(dir.path())).unwrap();
    assert_eq!(read_metrics(&path).unwrap().len(), 1);
}

#[test]
fn failed_checkpoint_write_leaves_no_temporary_file() {
    let exp = quick_experiment();
    let trainer = Trainer::new(&exp.model, &exp.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    // Renaming a file over a non-empty directory fails after the temporary file is written.
    let target = dir.path().join("occupied");
    fs::create_dir(&target).unwrap();
    fs::write(target.join("keep"), b"x").unwrap();
    assert!(save_checkpoint(&target, &trainer.checkpoint()).is_err());
    let names: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["occupied"]);
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let mut exp = quick_experiment();
    exp.train.learning_rate = 1e30;
    exp.train.max_steps = 4;
    let data = toy(&exp);
    match train(&exp.model, &data, &exp.train, None) {
        Err(PipelineError::NonFiniteLoss { step, objects }) => {
            assert!(step >= 2);
            assert_eq!(objects.len(), 2);
            assert!(objects.iter().all(|o| o.starts_with("toy-")));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn cross_table_shape_and_geometry_check() {
    let exp = quick_experiment();
    let data = toy(&exp);
    let ckpt = Trainer::new(&exp.model, &exp.train).unwrap().checkpoint();
    let mut ckpts = BTreeMap::from([(1, ckpt.clone())]);
    let table = multi_view_cross_table(&ckpts, &data, &[1], 0.5, 1).unwrap();
    assert_eq!((table.cells.len(), table.cells[0].len()), (1, 1));

    ckpts.insert(2, ckpt.clone());
    let table = multi_view_cross_table(&ckpts, &data, &[1, 2, 4], 0.5, 1).unwrap();
    assert_eq!(table.cells.len(), 2);
    assert!(table.cells.iter().all(|row| row.len() == 3));

    let mut other = exp.model.clone();
    other.decoder.layers = 1;
    let mismatched = Trainer::new(&other, &exp.train).unwrap().checkpoint();
    ckpts.insert(4, mismatched);
    assert!(matches!(
        multi_view_cross_table(&ckpts, &data, &[1], 0.5, 1),
        Err(PipelineError::Argument(_))
    ));
}

#[test]
fn predict_writes_deterministic_binvox() {
    let exp = quick_experiment();
    let ckpt = Trainer::new(&exp.model, &exp.train).unwrap().checkpoint();
    let data = toy(&exp);
    let dir = tempfile::tempdir().unwrap();
    let size = exp.model.image_size();
    let images: Vec<PathBuf> = (0..2)
        .map(|v| {
            let mask = render_silhouette(&data.samples[0].grid, v, size);
            let raw = silhouette_image(&mask, size);
            let path = dir.path().join(format!("view{v}.png"));
            let pixels: Vec<u8> = raw.data.iter().map(|&x| (x * 255.0).round() as u8).collect();
            image::RgbImage::from_raw(size as u32, size as u32, pixels)
                .unwrap()
                .save(&path)
                .unwrap();
            path
        })
        .collect();
    let pre = PreprocessConfig::with_size(size);
    let (a, b) = (dir.path().join("a.binvox"), dir.path().join("b.binvox"));
    let npy = dir.path().join("a.npy");
    predict(&ckpt, &images[..1], 0.5, &pre, &a, Some(&npy)).unwrap();
    predict(&ckpt, &images[..1], 0.5, &pre, &b, None).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(read_binvox(&bytes).unwrap().resolution(), 32);
    assert_eq!(fs::read(&npy).unwrap().len(), 128 + 4 * 32 * 32 * 32);
    predict(&ckpt, &images, 0.5, &pre, &a, None).unwrap();

    let too_many = vec![images[0].clone(); MAX_PREDICT_VIEWS + 1];
    assert!(matches!(
        predict(&ckpt, &too_many, 0.5, &pre, &a, None),
        Err(PipelineError::Argument(_))
    ));
    let missing = dir.path().join("missing.png");
    let err = predict(&ckpt, std::slice::from_ref(&missing), 0.5, &pre, &a, None).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
}

#[test]
fn toy_config_views_reach_the_dataset() {
    let cfg = ToyConfig {
        views: 8,
        count: 2,
        ..ToyConfig::default()
    };
    let data = ToyDataset::new(make_toy_dataset_with(&cfg).unwrap());
    assert_eq!(data.views_available(0), 8);
    assert_eq!(data.views(0, 8, 3).unwrap().len(), 8);
}

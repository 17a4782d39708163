//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line before asserting.
//!
//! Tests share a lock so wall-clock budgets are measured without other
//! criteria competing for the CPU. The lines go straight to stderr, so they
//! show up even when the harness captures output.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mvrecon_core::datasets::{make_toy_dataset_with, ToyConfig};
use mvrecon_core::encoder::{pool_views, FeatureSeq};
use mvrecon_core::losses::{dice_with_grad, DEFAULT_EPSILON};
use mvrecon_core::model::{count_params, ModelConfig, ReconModel};
use mvrecon_core::pipeline::{
    evaluate, load_checkpoint, run_ablation, save_checkpoint, train, AblationResources, AblationSetup,
    ExperimentConfig, ModelReconstructor, Preset, ToyDataset,
};
use mvrecon_core::voxgrid::{iou, read_binvox, write_binvox, VoxelError, VoxelGrid};
use mvrecon_core::vqvae::quantize;
use mvrecon_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // Writing to the handle directly bypasses libtest's output capture.
    let line = format!("criterion {n}: {verdict} ({:.1}s) {detail}\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_grid(rng: &mut ChaCha8Rng, r: usize) -> VoxelGrid {
    let density: f64 = rng.random_range(0.0..1.0);
    let occ = (0..r * r * r).map(|_| rng.random_bool(density) as u8).collect();
    VoxelGrid::from_occupancy(r, occ).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data = (0..3 * size * size).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Tensor::from_vec(vec![3, size, size], data)
}

/// Central-difference derivative of `f` along every coordinate of `p`.
fn finite_difference(p: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = p.to_vec();
    (0..p.len())
        .map(|i| {
            work[i] = p[i] + h;
            let up = f(&work);
            work[i] = p[i] - h;
            let down = f(&work);
            work[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn criterion_01_dice_exactness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    // The worked examples describe the unguarded formula, so they are checked
    // with a negligible guard; the default guard shifts them by O(1e-7).
    let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let examples = |eps: f64| {
        [
            dice_with_grad(&y, &y, eps).0,
            dice_with_grad(&flipped, &y, eps).0,
            dice_with_grad(&[0.5, 0.5], &[1.0, 0.0], eps).0,
        ]
    };
    let expected = [0.0, 1.0, 0.5];
    let deviation = |eps: f64| {
        examples(eps)
            .iter()
            .zip(expected)
            .fold(0.0f64, |m, (got, want)| m.max((got - want).abs()))
    };
    let worst_example = deviation(1e-12);
    let guarded_example = deviation(DEFAULT_EPSILON);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let n = 6 * 6 * 6;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let (_, analytic) = dice_with_grad(&p, &y, DEFAULT_EPSILON);
        let numeric = finite_difference(&p, 1e-5, |q| dice_with_grad(q, &y, DEFAULT_EPSILON).0);
        for (a, b) in analytic.iter().zip(&numeric) {
            worst_grad = worst_grad.max((a - b).abs() / (a.abs().max(b.abs()) + 1e-12));
        }
    }
    let elapsed = t.elapsed();
    let pass =
        worst_example <= 1e-9 && guarded_example <= 1e-6 && worst_grad <= 1e-4 && elapsed < Duration::from_secs(10);
    report(
        1,
        pass,
        elapsed,
        &format!(
            "example error {worst_example:.2e} (default guard {guarded_example:.2e}), gradient relative error {worst_grad:.2e}"
        ),
    );
    assert!(pass);
}

fn naive_iou(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let r = a.resolution();
    let (mut inter, mut union) = (0usize, 0usize);
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let (p, q) = (a.get(x, y, z), b.get(x, y, z));
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn criterion_02_iou_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for i in 0..50 {
        let a = random_grid(&mut rng, 32);
        // A few pairs share structure so the values are not all near the density product.
        let b = if i % 5 == 0 {
            a.clone()
        } else {
            random_grid(&mut rng, 32)
        };
        if iou(&a, &b).unwrap() != naive_iou(&a, &b) {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(30);
    report(2, pass, elapsed, &format!("{mismatches} of 50 pairs differ"));
    assert!(pass);
}

#[test]
fn criterion_03_binvox_codec() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for i in 0..20 {
        let r = [1, 2, 7, 16, 32][i % 5];
        let mut grid = random_grid(&mut rng, r);
        grid.translate = [rng.random_range(-1.0..1.0), 0.25, -0.5];
        grid.scale = rng.random_range(0.5..2.0);
        let bytes = write_binvox(&grid);
        match read_binvox(&bytes) {
            Ok(back) if back == grid && write_binvox(&back) == bytes => {}
            _ => failures.push(format!("random grid {i}")),
        }
    }

    let fixture = include_bytes!("fixtures/reference_32.binvox");
    let listed = include_str!("fixtures/reference_32.occupied.txt");
    match read_binvox(fixture) {
        Ok(grid) => {
            let mut expect = VoxelGrid::empty(32);
            for line in listed.lines().filter(|l| !l.trim().is_empty()) {
                let c: Vec<usize> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
                expect.set(c[0], c[1], c[2], true);
            }
            if grid.occupancy() != expect.occupancy()
                || grid.translate != [-0.25, 0.5, -1.125]
                || grid.scale != 1.75
                || write_binvox(&grid) != fixture
            {
                failures.push("reference fixture".into());
            }
        }
        Err(e) => failures.push(format!("reference fixture: {e}")),
    }

    let header = |dim: &str| format!("#binvox 1\n{dim}\ntranslate 0 0 0\nscale 1\ndata\n").into_bytes();
    let mut bad_magic = b"#voxels 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n".to_vec();
    bad_magic.extend([0, 8]);
    let mut bad_dim = header("dim 2 two 2");
    bad_dim.extend([0, 8]);
    let mut short = header("dim 2 2 2");
    short.extend([0, 5]);
    let verdicts = [
        matches!(read_binvox(&bad_magic), Err(VoxelError::Format { ref line, .. }) if line.contains("#voxels")),
        matches!(read_binvox(&bad_dim), Err(VoxelError::Format { ref line, .. }) if line.contains("two")),
        matches!(
            read_binvox(&short),
            Err(VoxelError::Truncated { expected: 8, found: 5 })
        ),
    ];
    for (i, ok) in verdicts.iter().enumerate() {
        if !ok {
            failures.push(format!("malformed file {i} not rejected with its error class"));
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(5);
    report(3, pass, elapsed, &format!("failures: {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_04_shape_and_range() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = ModelConfig::small();
    let (model, store) = ReconModel::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let size = cfg.image_size();
    let mut problems = Vec::new();
    let mut worst_latency = 0.0f64;
    for v in [1, 2, 3, 5, 8, 20] {
        let views: Vec<Tensor> = (0..v).map(|_| random_image(&mut rng, size)).collect();
        let start = Instant::now();
        let field = model.predict(&store, &views).unwrap();
        let per_view = start.elapsed().as_secs_f64() / v as f64;
        worst_latency = worst_latency.max(per_view);
        let in_range = field.values().iter().all(|&p| p.is_finite() && p > 0.0 && p < 1.0);
        if field.resolution() != 32 || field.values().len() != 32 * 32 * 32 || !in_range {
            problems.push(v);
        }
    }
    let elapsed = t.elapsed();
    let pass = problems.is_empty() && worst_latency < 5.0;
    report(
        4,
        pass,
        elapsed,
        &format!("bad view counts {problems:?}, worst per-view latency {worst_latency:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_view_order_invariance() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut pool_exact = true;
    for _ in 0..20 {
        let seqs: Vec<FeatureSeq> = (0..rng.random_range(2..7))
            .map(|_| {
                let data = (0..16 * 8).map(|_| rng.random_range(-3.0f32..3.0)).collect();
                FeatureSeq::new(Tensor::from_vec(vec![16, 8], data), 4).unwrap()
            })
            .collect();
        let base = pool_views(&seqs).unwrap();
        let mut shuffled = seqs.clone();
        for _ in 0..4 {
            let i = rng.random_range(0..shuffled.len());
            let j = rng.random_range(0..shuffled.len());
            shuffled.swap(i, j);
            let bits = |s: &FeatureSeq| s.tokens.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            pool_exact &= bits(&pool_views(&shuffled).unwrap()) == bits(&base);
        }
    }

    let cfg = ModelConfig::toy();
    let (model, store) = ReconModel::init(&cfg, 5).unwrap();
    let views: Vec<Tensor> = (0..5).map(|_| random_image(&mut rng, cfg.image_size())).collect();
    let base = model.predict(&store, &views).unwrap();
    let orders = [[4, 3, 2, 1, 0], [1, 0, 3, 2, 4], [2, 4, 0, 1, 3]];
    let mut worst = 0.0f64;
    for order in orders {
        let permuted: Vec<Tensor> = order.iter().map(|&i| views[i].clone()).collect();
        let out = model.predict(&store, &permuted).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            worst = worst.max(((a - b).abs() / b.abs().max(1e-12)) as f64);
        }
    }
    let elapsed = t.elapsed();
    let pass = pool_exact && worst <= 1e-5;
    report(
        5,
        pass,
        elapsed,
        &format!("pool_views bit-exact: {pool_exact}, end-to-end relative difference {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_overfit() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let exp = ExperimentConfig::preset(Preset::Toy);
    let data = ToyDataset::new(make_toy_dataset_with(&exp.data.toy).unwrap());
    assert_eq!(data.samples.len(), 8);
    assert!(exp.train.max_steps <= 500);
    let outcome = train(&exp.model, &data, &exp.train, None).unwrap();
    let last = outcome.metrics.last().unwrap();
    let elapsed = t.elapsed();
    let pass = last.iou >= 0.85 && elapsed < Duration::from_secs(15 * 60);
    // Trend invariant: after a 100-step warm-up, the loss at the end of every
    // 100-step window is at most the loss at its start plus 0.01.
    let loss: Vec<f64> = outcome.metrics.iter().map(|m| m.loss).collect();
    let worst_rise = (100..loss.len().saturating_sub(100))
        .map(|s| loss[s + 100] - loss[s])
        .fold(f64::NEG_INFINITY, f64::max);
    report(
        6,
        pass,
        elapsed,
        &format!(
            "train IoU {:.4} after {} steps (loss {:.4}), worst 100-step loss rise {worst_rise:.4}",
            last.iou, last.step, last.loss
        ),
    );
    assert!(pass);
    assert!(worst_rise <= 0.01, "loss rose by {worst_rise} over a 100-step window");
}

#[test]
fn criterion_07_parameter_counts() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let base = count_params(&ModelConfig::base()).unwrap() as f64;
    let small = count_params(&ModelConfig::small()).unwrap() as f64;
    let base_dev = (base - 163e6).abs() / 163e6;
    let small_dev = (small - 11e6).abs() / 11e6;
    let pass = base_dev <= 0.05 && small_dev <= 0.10;
    report(
        7,
        pass,
        t.elapsed(),
        &format!(
            "base {:.2}M ({:+.1}%), small {:.2}M ({:+.1}%)",
            base / 1e6,
            (base / 163e6 - 1.0) * 100.0,
            small / 1e6,
            (small / 11e6 - 1.0) * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_ablation_smoke() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let exp = ExperimentConfig::preset(Preset::Toy);
    let data = ToyDataset::new(make_toy_dataset_with(&exp.data.toy).unwrap());
    let resources = AblationResources::default();
    let mut problems = Vec::new();
    let mut extra = BTreeMap::new();
    for setup in AblationSetup::ALL {
        let mut cfg = exp.clone();
        if setup != AblationSetup::TwoStage {
            cfg.train.max_steps = 1;
        }
        match run_ablation(setup, &cfg, &resources, &data, &data, None) {
            Ok(row) if row.report.overall_iou.is_finite() => {
                if setup == AblationSetup::TwoStage {
                    extra = row.extra;
                }
            }
            Ok(_) => problems.push(format!("setup {}: non-finite IoU", setup.id())),
            Err(e) => problems.push(format!("setup {}: {e}", setup.id())),
        }
    }
    let stage1 = extra.get("stage1_reconstruction_iou").copied().unwrap_or(0.0);
    let stage2 = extra.get("stage2_token_accuracy").copied().unwrap_or(0.0);
    let elapsed = t.elapsed();
    let pass = problems.is_empty() && stage1 >= 0.85 && stage2 >= 0.95 && elapsed < Duration::from_secs(30 * 60);
    report(
        8,
        pass,
        elapsed,
        &format!("stage-1 IoU {stage1:.4}, stage-2 token accuracy {stage2:.4}, errors {problems:?}"),
    );
    assert!(pass);
}

fn brute_force_nearest(z: &[f32], book: &[f32], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, row) in book.chunks(d).enumerate() {
        let dist: f64 = z.iter().zip(row).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if dist < best.0 {
            best = (dist, j);
        }
    }
    best.1
}

#[test]
fn criterion_09_quantizer_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, d, rows) = (4, 2, 16);
    let mut mismatches = 0;
    let mut ties = 0;
    for instance in 0..100 {
        // Even instances use small integers, which produce exact distance ties.
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    if instance % 2 == 0 {
                        rng.random_range(-2i32..=2) as f32
                    } else {
                        rng.random_range(-1.0f32..1.0)
                    }
                })
                .collect()
        };
        let book = draw(k * d);
        let z = draw(rows * d);
        let (codes, selected) = quantize(
            &Tensor::from_vec(vec![rows, d], z.clone()),
            &Tensor::from_vec(vec![k, d], book.clone()),
        );
        for (r, zr) in z.chunks(d).enumerate() {
            let want = brute_force_nearest(zr, &book, d);
            let dists: Vec<f64> = book
                .chunks(d)
                .map(|row| zr.iter().zip(row).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            ties += (dists.iter().filter(|&&x| x == min).count() > 1) as usize;
            if codes[r] != want || selected.data()[r * d..(r + 1) * d] != book[want * d..(want + 1) * d] {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && ties > 0;
    report(
        9,
        pass,
        t.elapsed(),
        &format!("{mismatches} mismatches over 1600 rows, {ties} rows with tied distances"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut exp = ExperimentConfig::preset(Preset::Toy);
    exp.train.max_steps = 6;
    exp.train.checkpoint_every = 3;
    exp.train.mixed_precision = false;
    let data = ToyDataset::new(make_toy_dataset_with(&exp.data.toy).unwrap());
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        train(&exp.model, &data, &exp.train, Some(dir.path())).unwrap();
    }
    let read = |name: &str| dirs.each_ref().map(|d| std::fs::read(d.path().join(name)).unwrap());
    let [m0, m1] = read("metrics.ndjson");
    let metrics_equal = m0 == m1 && !m0.is_empty();
    let [c0, c1] = read("final.safetensors");
    let checkpoints_equal = c0 == c1;

    let ckpt = load_checkpoint(&dirs[0].path().join("final.safetensors")).unwrap();
    let resaved = dirs[0].path().join("resaved.safetensors");
    save_checkpoint(&resaved, &ckpt).unwrap();
    let reloaded = load_checkpoint(&resaved).unwrap();
    let views: Vec<Tensor> = (0..3).map(|i| data.samples[i].views.images[i % 4].clone()).collect();
    let a = ckpt.model.predict(&ckpt.store, &views).unwrap();
    let b = reloaded.model.predict(&reloaded.store, &views).unwrap();
    let bits = |f: &mvrecon_core::voxgrid::VoxelField| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let forward_equal = bits(&a) == bits(&b);

    let pass = metrics_equal && checkpoints_equal && forward_equal;
    report(
        10,
        pass,
        t.elapsed(),
        &format!("metrics identical: {metrics_equal}, checkpoints identical: {checkpoints_equal}, reloaded forward bit-exact: {forward_equal}"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_multi_view_trend() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut exp = ExperimentConfig::preset(Preset::Toy);
    exp.data.toy = ToyConfig {
        views: 8,
        ..exp.data.toy.clone()
    };
    exp.train.views_per_sample = 4;
    exp.train.max_steps = 150;
    let data = ToyDataset::new(make_toy_dataset_with(&exp.data.toy).unwrap());
    let mut at_one = Vec::new();
    let mut at_eight = Vec::new();
    for seed in [11, 12, 13] {
        exp.train.seed = seed;
        let outcome = train(&exp.model, &data, &exp.train, None).unwrap();
        let recon = ModelReconstructor::new(&outcome.trainer.model, &outcome.trainer.store);
        for (v, out) in [(1, &mut at_one), (8, &mut at_eight)] {
            out.push(
                evaluate(&recon, &data, v, exp.eval.threshold, exp.eval.seed)
                    .unwrap()
                    .overall_iou,
            );
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (one, eight) = (mean(&at_one), mean(&at_eight));
    let pass = eight >= one;
    report(
        11,
        pass,
        t.elapsed(),
        &format!("mean IoU at 1 view {one:.4} {at_one:.4?}, at 8 views {eight:.4} {at_eight:.4?}"),
    );
    assert!(pass);
}

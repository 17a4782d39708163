//! End-to-end runs of the `mvrecon` binary on a generated toy tree.

use std::path::Path;
use std::process::{Command, Output};

fn mvrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvrecon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvrecon(args);
    assert!(
        out.status.success(),
        "mvrecon {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn disk_flags(root: &Path) -> Vec<String> {
    vec![
        "--set".into(),
        "data.kind=shapenet".into(),
        "--set".into(),
        format!("data.root={:?}", root.display().to_string()),
        "--set".into(),
        "data.toy.count=3".into(),
    ]
}

#[test]
fn train_eval_sweep_predict_on_a_toy_tree() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let run = dir.path().join("run");
    let root_s = root.to_str().unwrap();
    let run_s = run.to_str().unwrap();
    let flags = disk_flags(&root);
    let with = |args: &[&str]| -> Vec<String> {
        args.iter()
            .map(|s| s.to_string())
            .chain(flags.iter().cloned())
            .collect()
    };
    let call = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    assert!(ok(&["toy-data", "--out", root_s, "--set", "data.toy.count=3"]).contains("wrote 3 toy objects"));
    let summary = call(with(&["preprocess", "--split", "test", "--deep"]));
    assert!(summary.contains("3 objects in split test"), "{summary}");

    let trained = call(with(&[
        "train",
        "--out",
        run_s,
        "--set",
        "train.max_steps=2",
        "--set",
        "train.batch_size=2",
    ]));
    assert!(trained.contains("step 2"), "{trained}");
    assert!(run.join("config.toml").is_file());
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.ndjson"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let ckpt = run.join("final.safetensors");
    let ckpt_s = ckpt.to_str().unwrap();
    let resumed = call(with(&[
        "train",
        "--out",
        run_s,
        "--resume",
        ckpt_s,
        "--set",
        "train.max_steps=3",
    ]));
    assert!(resumed.contains("step 3"), "{resumed}");
    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    let json = dir.path().join("report.json");
    let eval = call(with(&[
        "eval",
        "--checkpoint",
        ckpt_s,
        "--views",
        "2",
        "--json",
        json.to_str().unwrap(),
    ]));
    assert!(eval.contains("overall"), "{eval}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["views_used"], 2);

    let csv = call(with(&[
        "sweep",
        "--checkpoint",
        ckpt_s,
        "--views",
        "1,2",
        "--format",
        "csv",
    ]));
    assert!(csv.starts_with("category,views,iou"), "{csv}");
    assert!(csv.contains("overall,2,"));
    let cross_arg = format!("1={ckpt_s}");
    let cross = call(with(&["sweep", "--cross", &cross_arg, "--views", "1,3"]));
    assert!(cross.contains("| 1 |"), "{cross}");

    let image = root.join("cuboid/toy-0000/rendering/00.png");
    let out = dir.path().join("pred.binvox");
    let npy = dir.path().join("pred.npy");
    call(with(&[
        "predict",
        "--checkpoint",
        ckpt_s,
        "--image",
        image.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--npy",
        npy.to_str().unwrap(),
    ]));
    let bytes = std::fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"#binvox 1\ndim 32 32 32\n"));
    assert!(npy.is_file());
}

#[test]
fn ablation_setup_runs_one_step() {
    let out = ok(&[
        "ablate",
        "--setup",
        "6",
        "--set",
        "train.max_steps=1",
        "--set",
        "data.toy.count=2",
    ]);
    assert!(out.contains("| 6 | MLP voxel head |"), "{out}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    for args in [
        &["ablate", "--setup", "7"][..],
        &["train", "--out", "/nonexistent/x", "--set", "train.batch_size=0"],
        &["eval", "--checkpoint", "/nonexistent.safetensors"],
        &["toy-data", "--out", "/tmp/unused", "--preset", "huge"],
        &["sweep", "--views", "1"],
    ] {
        let out = mvrecon(args);
        assert!(!out.status.success(), "mvrecon {args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}

//! `mvrecon`: command-line front end for the voxel reconstruction toolkit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvrecon_core::datasets::{write_toy_shapenet, Split};
use mvrecon_core::pipeline::{
    evaluate, load_checkpoint, multi_view_cross_table, predict, run_ablation, sweep, train, train_from,
    AblationResources, AblationSetup, Checkpoint, ExperimentConfig, ModelReconstructor, Preset, Trainer, SWEEP_VIEWS,
};

#[derive(Parser)]
#[command(name = "mvrecon", version, about = "Multi-view 3D voxel reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every verb. Precedence is
/// `--set` over `--config` over the preset.
#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// Built-in defaults to start from: toy, small or base.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// TOML experiment file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, repeatable (e.g. `train.max_steps=100`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let preset: Preset = self.preset.parse()?;
        Ok(ExperimentConfig::resolve(
            preset,
            self.config.as_deref(),
            &self.overrides,
        )?)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Builds and validates a dataset manifest.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Also decode every voxel file and image.
        #[arg(long)]
        deep: bool,
        /// Writes the manifest records as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a model, writing metrics and checkpoints to a directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for config, metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continues from this checkpoint up to `train.max_steps`. Model and
        /// optimizer settings come from the checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint (`.safetensors`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Views per object; defaults to `eval.views`.
        #[arg(long)]
        views: Option<usize>,
        /// Writes the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Evaluates across view counts, or across checkpoints with `--cross`.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint for a view-count sweep.
        #[arg(long, required_unless_present = "cross")]
        checkpoint: Option<PathBuf>,
        /// `TRAIN_VIEWS=PATH` checkpoint for the cross table, repeatable.
        #[arg(long, value_name = "V=PATH", conflicts_with = "checkpoint")]
        cross: Vec<String>,
        /// Comma-separated evaluation view counts.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "markdown")]
        format: TableFormat,
    },
    /// Trains and evaluates one ablation setup.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Setup number, 1 to 6.
        #[arg(long)]
        setup: u8,
        /// Residual CNN weights for setup 3.
        #[arg(long)]
        resnet_weights: Option<PathBuf>,
        /// Directory for the ablation report and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstructs one object from images.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint (`.safetensors`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image, repeatable (1 to 20).
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Output binvox file.
        #[arg(long)]
        out: PathBuf,
        /// Also writes the probability field as a float32 `.npy`.
        #[arg(long)]
        npy: Option<PathBuf>,
        /// Occupancy threshold; defaults to `eval.threshold`.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Writes the procedural dataset as a ShapeNet-style tree.
    ToyData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Root directory of the generated tree.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Preprocess { cfg, split, deep, out } => {
            cmd_preprocess(&cfg.resolve()?, split.into(), deep, out.as_deref())
        }
        Command::Train { cfg, out, resume } => cmd_train(&cfg.resolve()?, &out, resume.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            views,
            json,
        } => cmd_eval(&cfg.resolve()?, &checkpoint, split.into(), views, json.as_deref()),
        Command::Sweep {
            cfg,
            checkpoint,
            cross,
            views,
            split,
            format,
        } => cmd_sweep(
            &cfg.resolve()?,
            checkpoint.as_deref(),
            &cross,
            views,
            split.into(),
            format,
        ),
        Command::Ablate {
            cfg,
            setup,
            resnet_weights,
            out,
        } => cmd_ablate(&cfg.resolve()?, setup, resnet_weights, out.as_deref()),
        Command::Predict {
            cfg,
            checkpoint,
            images,
            out,
            npy,
            threshold,
        } => {
            let exp = cfg.resolve()?;
            let ckpt = load(&checkpoint)?;
            let mut preprocess = exp.data.preprocess.clone();
            preprocess.target_size = ckpt.model.cfg.image_size();
            let threshold = threshold.unwrap_or(exp.eval.threshold);
            let field = predict(&ckpt, &images, threshold, &preprocess, &out, npy.as_deref())?;
            let occupied = field.values().iter().filter(|&&p| p > threshold).count();
            println!("wrote {} ({} occupied voxels)", out.display(), occupied);
            Ok(())
        }
        Command::ToyData { cfg, out } => {
            let exp = cfg.resolve()?;
            let records = write_toy_shapenet(&out, &exp.data.toy)?;
            println!("wrote {} toy objects to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_preprocess(exp: &ExperimentConfig, split: Split, deep: bool, out: Option<&Path>) -> Result<()> {
    let records = exp.data.records(split)?;
    let mut per_category: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &records {
        let entry = per_category.entry(&r.category).or_default();
        entry.0 += 1;
        entry.1 += r.view_paths.len();
        if deep {
            r.load_voxels()?;
            for p in &r.view_paths {
                mvrecon_core::datasets::RawImage::load(p)?;
            }
        }
    }
    println!("{} objects in split {}", records.len(), split.name());
    for (cat, (objects, views)) in &per_category {
        println!("  {cat}: {objects} objects, {views} views");
    }
    if let Some(path) = out {
        write_json(path, &records)?;
    }
    Ok(())
}

fn cmd_train(exp: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let data = exp.data.open(Split::Train)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), exp.to_toml())?;
    let outcome = match resume {
        Some(path) => {
            let mut trainer = Trainer::from_checkpoint(load(path)?);
            trainer.train_cfg.max_steps = exp.train.max_steps;
            train_from(trainer, data.as_ref(), Some(out))?
        }
        None => train(&exp.model, data.as_ref(), &exp.train, Some(out))?,
    };
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.6} iou {:.4}", last.step, last.loss, last.iou);
    }
    println!("checkpoint: {}", out.join("final.safetensors").display());
    Ok(())
}

fn cmd_eval(
    exp: &ExperimentConfig,
    ckpt: &Path,
    split: Split,
    views: Option<usize>,
    json: Option<&Path>,
) -> Result<()> {
    let ckpt = load(ckpt)?;
    let data = exp.data.open(split)?;
    let recon = ModelReconstructor::from_checkpoint(&ckpt);
    let report = evaluate(
        &recon,
        data.as_ref(),
        views.unwrap_or(exp.eval.views),
        exp.eval.threshold,
        exp.eval.seed,
    )?;
    for (cat, iou) in &report.per_category_iou {
        println!("{cat}\t{iou:.4}");
    }
    println!(
        "overall\t{:.4} ({} objects, {} views)",
        report.overall_iou, report.sample_count, report.views_used
    );
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_sweep(
    exp: &ExperimentConfig,
    checkpoint: Option<&Path>,
    cross: &[String],
    views: Option<Vec<usize>>,
    split: Split,
    format: TableFormat,
) -> Result<()> {
    let views = views.unwrap_or_else(|| SWEEP_VIEWS.to_vec());
    let data = exp.data.open(split)?;
    if !cross.is_empty() {
        let mut ckpts = BTreeMap::new();
        for item in cross {
            let (v, path) = item
                .split_once('=')
                .with_context(|| format!("--cross {item:?} is not V=PATH"))?;
            let v: usize = v
                .trim()
                .parse()
                .with_context(|| format!("bad view count in {item:?}"))?;
            ckpts.insert(v, load(Path::new(path.trim()))?);
        }
        let table = multi_view_cross_table(&ckpts, data.as_ref(), &views, exp.eval.threshold, exp.eval.seed)?;
        match format {
            TableFormat::Json => println!("{}", serde_json::to_string_pretty(&table)?),
            TableFormat::Markdown => print!("{}", table.to_markdown()),
            TableFormat::Csv => bail!("the cross table supports markdown and json output"),
        }
        return Ok(());
    }
    let Some(path) = checkpoint else {
        bail!("either --checkpoint or --cross is required");
    };
    let ckpt = load(path)?;
    let recon = ModelReconstructor::from_checkpoint(&ckpt);
    let table = sweep(&recon, data.as_ref(), &views, exp.eval.threshold, exp.eval.seed)?;
    match format {
        TableFormat::Markdown => print!("{}", table.to_markdown()),
        TableFormat::Csv => print!("{}", table.to_csv()),
        TableFormat::Json => println!("{}", serde_json::to_string_pretty(&table)?),
    }
    Ok(())
}

fn cmd_ablate(exp: &ExperimentConfig, setup: u8, resnet_weights: Option<PathBuf>, out: Option<&Path>) -> Result<()> {
    let setup = AblationSetup::from_id(setup)?;
    let train_data = exp.data.open(Split::Train)?;
    let eval_data = exp.data.open(Split::Test)?;
    let resources = AblationResources { resnet_weights };
    let row = run_ablation(setup, exp, &resources, train_data.as_ref(), eval_data.as_ref(), out)?;
    println!("| setup | variant | IoU |\n|---:|---|---:|");
    println!("{}", row.to_markdown_line());
    for (k, v) in &row.extra {
        println!("{k}: {v:.4}");
    }
    if let Some(dir) = out {
        write_json(&dir.join("ablation.json"), &row)?;
    }
    Ok(())
}

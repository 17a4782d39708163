//! Voxel IoU evaluation, multi-view sweeps and train/eval view tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use mvrecon_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::data::Dataset;
use super::{mix_seed, PipelineError};
use crate::model::ReconModel;
use crate::voxgrid::{iou, threshold as binarize, VoxelField};

/// View counts of the standard multi-view sweep.
pub const SWEEP_VIEWS: [usize; 9] = [1, 2, 3, 4, 5, 8, 12, 16, 20];

/// Anything that turns the views of one object into an occupancy field.
pub trait Reconstructor {
    fn reconstruct(&self, object_id: &str, views: &[Tensor]) -> Result<VoxelField, PipelineError>;
}

/// A trained model with its parameters.
#[derive(Clone, Copy, Debug)]
pub struct ModelReconstructor<'a> {
    pub model: &'a ReconModel,
    pub store: &'a ParamStore,
}

impl<'a> ModelReconstructor<'a> {
    pub fn new(model: &'a ReconModel, store: &'a ParamStore) -> Self {
        Self { model, store }
    }

    pub fn from_checkpoint(ckpt: &'a Checkpoint) -> Self {
        Self::new(&ckpt.model, &ckpt.store)
    }
}

impl Reconstructor for ModelReconstructor<'_> {
    fn reconstruct(&self, _object_id: &str, views: &[Tensor]) -> Result<VoxelField, PipelineError> {
        Ok(self.model.predict(self.store, views)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_iou: BTreeMap<String, f64>,
    /// Mean of the per-category values.
    pub overall_iou: f64,
    /// Mean over objects, for comparison with per-example conventions.
    pub per_example_iou: f64,
    pub views_used: usize,
    pub threshold: f32,
    pub sample_count: usize,
}

/// Scores every object of `data` with `v_eval` views each.
///
/// Views are drawn per object from a stream fixed by `seed`, so repeated
/// evaluations see the same images.
pub fn evaluate(
    recon: &dyn Reconstructor,
    data: &dyn Dataset,
    v_eval: usize,
    threshold: f32,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Argument("evaluation split is empty".into()));
    }
    if v_eval == 0 {
        return Err(PipelineError::Argument(
            "at least one evaluation view is required".into(),
        ));
    }
    let mut by_cat: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..data.len() {
        let views = data.views(i, v_eval, mix_seed(seed, &[3, i as u64]))?;
        let target = data.target(i)?;
        let field = recon.reconstruct(data.object_id(i), &views)?;
        let score = iou(&binarize(&field, threshold)?, &target)?;
        let slot = by_cat.entry(data.category(i).to_string()).or_insert((0.0, 0));
        slot.0 += score;
        slot.1 += 1;
        total += score;
    }
    let per_category_iou: BTreeMap<String, f64> = by_cat.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let overall_iou = per_category_iou.values().sum::<f64>() / per_category_iou.len() as f64;
    Ok(EvalReport {
        per_category_iou,
        overall_iou,
        per_example_iou: total / data.len() as f64,
        views_used: v_eval,
        threshold,
        sample_count: data.len(),
    })
}

/// One report per evaluation view count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub reports: Vec<EvalReport>,
}

impl SweepTable {
    fn categories(&self) -> Vec<&str> {
        let mut cats: Vec<&str> = self
            .reports
            .iter()
            .flat_map(|r| r.per_category_iou.keys().map(String::as_str))
            .collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }

    /// Rows are categories plus an overall row; columns are view counts.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| category |");
        for r in &self.reports {
            let _ = write!(
                out,
                " {} view{} |",
                r.views_used,
                if r.views_used == 1 { "" } else { "s" }
            );
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.reports.len()));
        out.push('\n');
        for cat in self.categories() {
            let _ = write!(out, "| {cat} |");
            for r in &self.reports {
                match r.per_category_iou.get(cat) {
                    Some(v) => write!(out, " {v:.4} |"),
                    None => write!(out, " - |"),
                }
                .expect("writing to a string");
            }
            out.push('\n');
        }
        out.push_str("| overall |");
        for r in &self.reports {
            let _ = write!(out, " {:.4} |", r.overall_iou);
        }
        out.push('\n');
        out
    }

    /// `category,views,iou` lines with an `overall` category.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,views,iou\n");
        for r in &self.reports {
            for (cat, v) in &r.per_category_iou {
                let _ = writeln!(out, "{cat},{},{v}", r.views_used);
            }
            let _ = writeln!(out, "overall,{},{}", r.views_used, r.overall_iou);
        }
        out
    }
}

/// Evaluates once per entry of `views`.
pub fn sweep(
    recon: &dyn Reconstructor,
    data: &dyn Dataset,
    views: &[usize],
    threshold: f32,
    seed: u64,
) -> Result<SweepTable, PipelineError> {
    let reports = views
        .iter()
        .map(|&v| evaluate(recon, data, v, threshold, seed))
        .collect::<Result<_, _>>()?;
    Ok(SweepTable { reports })
}

/// Overall IoU for each (training views, evaluation views) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTable {
    pub train_views: Vec<usize>,
    pub eval_views: Vec<usize>,
    /// `cells[row][col]` for `train_views[row]` and `eval_views[col]`.
    pub cells: Vec<Vec<f64>>,
}

impl CrossTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| train \\ eval |");
        for v in &self.eval_views {
            let _ = write!(out, " {v} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.eval_views.len()));
        out.push('\n');
        for (t, row) in self.train_views.iter().zip(&self.cells) {
            let _ = write!(out, "| {t} |");
            for v in row {
                let _ = write!(out, " {v:.4} |");
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every checkpoint (keyed by its training view count) at every
/// evaluation view count. All checkpoints must share one model geometry.
pub fn multi_view_cross_table(
    ckpts: &BTreeMap<usize, Checkpoint>,
    data: &dyn Dataset,
    eval_views: &[usize],
    threshold: f32,
    seed: u64,
) -> Result<CrossTable, PipelineError> {
    let Some(first) = ckpts.values().next() else {
        return Err(PipelineError::Argument("no checkpoints given".into()));
    };
    if let Some((v, _)) = ckpts.iter().find(|(_, c)| c.model.cfg != first.model.cfg) {
        return Err(PipelineError::Argument(format!(
            "checkpoint for {v} training views has a different model geometry"
        )));
    }
    let mut cells = Vec::with_capacity(ckpts.len());
    for ckpt in ckpts.values() {
        let recon = ModelReconstructor::from_checkpoint(ckpt);
        let row = eval_views
            .iter()
            .map(|&v| evaluate(&recon, data, v, threshold, seed).map(|r| r.overall_iou))
            .collect::<Result<Vec<_>, _>>()?;
        cells.push(row);
    }
    Ok(CrossTable {
        train_views: ckpts.keys().copied().collect(),
        eval_views: eval_views.to_vec(),
        cells,
    })
}

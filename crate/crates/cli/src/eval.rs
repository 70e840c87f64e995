use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use lanetr_core::autograd::load_checkpoint;
use lanetr_core::data::{evaluate_with, load_dataset, scaled_threshold, Dataset, EvalOptions, EvalResult};
use lanetr_core::matching::{Prediction, PredictionSet};
use lanetr_core::model::LaneModel;
use serde_json::json;

use crate::log::emit;
use crate::Context;

pub const REPORT_FILE: &str = "eval.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "ground_truth", required_unless_present = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the generator's exact curve parameters instead of a model.
    #[arg(long)]
    pub ground_truth: bool,
    /// Threshold in pixels; overrides `run.threshold_px`.
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn result(preds: &[PredictionSet], ds: &Dataset, threshold: f64) -> Result<EvalResult> {
    let gts: Vec<_> = ds.samples.iter().map(|s| s.gts.clone()).collect();
    let clips: Vec<usize> = ds.samples.iter().map(|s| s.index).collect();
    let h = ds.manifest.height as f64;
    Ok(evaluate_with(preds, &gts, &clips, h, &EvalOptions::new(threshold))?)
}

/// Evaluates the last decoder layer of `model` on every scene of `ds`.
pub fn evaluate_model(model: &LaneModel, ds: &Dataset, threshold: f64) -> Result<EvalResult> {
    let preds = ds
        .samples
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<lanetr_core::Result<Vec<_>>>()?;
    result(&preds, ds, threshold)
}

/// Predictions holding the exact generator parameters with certainty.
pub fn ground_truth_predictions(ds: &Dataset) -> Result<Vec<PredictionSet>> {
    ds.samples
        .iter()
        .map(|s| {
            let items = s
                .params
                .iter()
                .map(|&params| Prediction {
                    probs: [0.0, 1.0],
                    params,
                })
                .collect();
            Ok(PredictionSet::new(items)?)
        })
        .collect()
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let ds = load_dataset(&args.dataset).with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let threshold = args
        .threshold
        .or(ctx.config.run.threshold_px)
        .unwrap_or_else(|| scaled_threshold(ds.manifest.height as f64));
    if !(threshold > 0.0) {
        bail!("threshold must be positive, got {threshold}");
    }
    let (r, source) = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let model = LaneModel::from_checkpoint(&ckpt)?;
            let mc = model.config();
            if (ds.manifest.width, ds.manifest.height) != (mc.input_w, mc.input_h) {
                bail!(
                    "dataset is {}x{} but the model expects {}x{}",
                    ds.manifest.width,
                    ds.manifest.height,
                    mc.input_w,
                    mc.input_h
                );
            }
            (evaluate_model(&model, &ds, threshold)?, path.display().to_string())
        }
        None => (result(&ground_truth_predictions(&ds)?, &ds, threshold)?, "ground_truth".to_string()),
    };
    let report = json!({
        "event": "eval",
        "source": source,
        "dataset": args.dataset,
        "threshold_px": threshold,
        "accuracy": r.accuracy,
        "fp_rate": r.fp_rate,
        "fn_rate": r.fn_rate,
        "totals": r.totals,
    });
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(REPORT_FILE);
        let full = json!({"summary": report, "per_clip": r.per_clip});
        fs::write(&path, format!("{full:#}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&report);
    Ok(())
}

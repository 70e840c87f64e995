use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use lanetr_core::autograd::{load_checkpoint, save_checkpoint};
use lanetr_core::data::{load_dataset, Dataset};
use lanetr_core::model::{LaneModel, OutputCodec, Trainer};
use serde_json::json;

use crate::eval::evaluate_model;
use crate::log::JsonLog;
use crate::Context;

pub const LOG_FILE: &str = "train.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Training dataset; overrides `data.train`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out dataset; overrides `data.eval`.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total step count; overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn save(trainer: &Trainer, out: &Path) -> Result<PathBuf> {
    let ckpt = trainer.to_checkpoint();
    let path = out.join(checkpoint_name(trainer.steps_done()));
    save_checkpoint(&path, &ckpt)?;
    save_checkpoint(&out.join(LATEST_CHECKPOINT), &ckpt)?;
    Ok(path)
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let cfg = &ctx.config;
    let seed = cfg.require_seed(ctx.seed)?;
    let out = ctx.out_dir()?;
    let train_dir = args
        .dataset
        .as_ref()
        .or(cfg.data.train.as_ref())
        .context("no training dataset: pass --dataset or set data.train")?;
    let train = load(train_dir)?;
    let held_out = args
        .eval_dataset
        .as_ref()
        .or(cfg.data.eval.as_ref())
        .map(|p| load(p))
        .transpose()?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            let mut model = LaneModel::new(cfg.model.clone(), seed)?;
            let labels: Vec<_> = train.samples.iter().flat_map(|s| s.params.iter().copied()).collect();
            let mc = model.config();
            model.set_codec(OutputCodec::fit(mc.input_w as f64, mc.input_h as f64, &labels));
            Trainer::new(model, cfg.train.clone(), seed)?
        }
    };
    let mc = trainer.model.config();
    for ds in std::iter::once(&train).chain(&held_out) {
        if (ds.manifest.width, ds.manifest.height) != (mc.input_w, mc.input_h) {
            bail!(
                "dataset {} is {}x{} but the model expects {}x{}",
                ds.dir.display(),
                ds.manifest.width,
                ds.manifest.height,
                mc.input_w,
                mc.input_h
            );
        }
    }
    let threshold = cfg
        .run
        .threshold_px
        .unwrap_or_else(|| lanetr_core::data::scaled_threshold(mc.input_h as f64));

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = JsonLog::open(&out.join(LOG_FILE), args.resume.is_some())?;
    let until = args.steps.unwrap_or(cfg.train.steps);
    log.write(&json!({
        "event": "start",
        "step": trainer.steps_done(),
        "until": until,
        "seed": seed,
        "scenes": train.samples.len(),
        "parameters": trainer.model.store().numel(),
    }))?;

    let started = Instant::now();
    let mut last_saved = None;
    while trainer.steps_done() < until {
        if cfg.run.max_seconds > 0.0 && started.elapsed().as_secs_f64() >= cfg.run.max_seconds {
            log.write(&json!({"event": "budget", "step": trainer.steps_done()}))?;
            break;
        }
        let batch = trainer.batch(&train.samples, trainer.steps_done())?;
        let info = trainer.train_step(&batch)?;
        if !info.loss.is_finite() {
            bail!("loss became non-finite at step {}", info.step);
        }
        if info.step % cfg.run.log_every == 0 || info.step == until {
            log.write(&json!({
                "event": "step",
                "step": info.step,
                "loss": info.loss,
                "last_layer_loss": info.last_layer_loss,
            }))?;
        }
        if info.step % cfg.run.checkpoint_every == 0 {
            let path = save(&trainer, out)?;
            log.write(&json!({"event": "checkpoint", "step": info.step, "path": path}))?;
            last_saved = Some(info.step);
        }
        if let Some(ds) = &held_out {
            if cfg.run.eval_every > 0 && info.step % cfg.run.eval_every == 0 {
                let r = evaluate_model(&trainer.model, ds, threshold)?;
                log.write(&json!({
                    "event": "eval",
                    "step": info.step,
                    "accuracy": r.accuracy,
                    "fp_rate": r.fp_rate,
                    "fn_rate": r.fn_rate,
                }))?;
            }
        }
    }
    if last_saved != Some(trainer.steps_done()) {
        let path = save(&trainer, out)?;
        log.write(&json!({"event": "checkpoint", "step": trainer.steps_done(), "path": path}))?;
    }
    log.write(&json!({"event": "done", "step": trainer.steps_done()}))?;
    Ok(())
}

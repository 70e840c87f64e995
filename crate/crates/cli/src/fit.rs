use std::fs;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use lanetr_core::data::parse_annotations;
use lanetr_core::geometry::{fit_tilted_curve, FitOptions, LanePolyline};
use serde_json::json;

use crate::log::emit;
use crate::Context;

pub const REPORT_FILE: &str = "fit.jsonl";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Line-delimited annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Image height in pixels; overrides `fit.image_height`.
    #[arg(long)]
    pub image_height: Option<f64>,
    /// Pin the cubic coefficient to zero.
    #[arg(long)]
    pub quadratic: bool,
    /// Fit each lane's shape independently.
    #[arg(long)]
    pub per_lane: bool,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let cfg = &ctx.config.fit;
    let image_h = args
        .image_height
        .or(cfg.image_height)
        .unwrap_or(ctx.config.gen.height as f64);
    let opts = FitOptions::new(image_h)
        .shared(cfg.share_shape && !args.per_lane)
        .cubic(cfg.cubic && !args.quadratic);
    let (records, sets) = parse_annotations(&args.annotations, image_h)?;

    let mut lines = String::new();
    let mut total_sq = 0.0;
    let mut total_points = 0usize;
    let mut max_rms: f64 = 0.0;
    for (i, (record, gts)) in records.iter().zip(&sets).enumerate() {
        let lanes: Vec<LanePolyline> = gts.lanes().map(|l| l.polyline.clone()).collect();
        let fit = fit_tilted_curve(&lanes, &opts)
            .with_context(|| format!("fitting record {} ({})", i + 1, record.raw_file))?;
        let points: usize = lanes.iter().map(|l| l.points().len()).sum();
        total_sq += fit.rms_residual.powi(2) * points as f64;
        total_points += points;
        max_rms = max_rms.max(fit.rms_residual);
        let line = json!({
            "raw_file": record.raw_file,
            "lanes": fit.lanes,
            "shared": fit.shared,
            "rms_residual": fit.rms_residual,
            "lane_rms": fit.lane_rms,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    match &ctx.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(REPORT_FILE);
            fs::write(&path, &lines).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{lines}"),
    }
    let rms = if total_points == 0 {
        0.0
    } else {
        (total_sq / total_points as f64).sqrt()
    };
    emit(&json!({
        "event": "fit",
        "images": records.len(),
        "share_shape": opts.share_shape,
        "cubic": opts.cubic,
        "rms_residual": rms,
        "max_image_rms": max_rms,
    }));
    Ok(())
}

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use lanetr_core::autograd::{load_checkpoint, Graph};
use lanetr_core::data::GrayImage;
use lanetr_core::model::{attention_row, LaneModel};
use serde_json::json;

use crate::log::emit;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (binary graymap).
    #[arg(long)]
    pub image: PathBuf,
    /// Encoder query cell `ROW,COL` on the feature grid.
    #[arg(long, value_parser = parse_cell, conflicts_with = "slot", required_unless_present = "slot")]
    pub pixel: Option<(usize, usize)>,
    /// Decoder slot whose cross-attention is dumped.
    #[arg(long)]
    pub slot: Option<usize>,
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

/// Share of the total mass held by the largest tenth of the cells.
fn top_decile_mass(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = values.len().div_ceil(10);
    let total: f64 = values.iter().sum();
    sorted[..k].iter().sum::<f64>() / total
}

fn to_graymap(values: &[f64], w: usize, h: usize) -> Result<GrayImage> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let pixels = values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(GrayImage::new(w, h, pixels)?)
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let out = ctx.out_dir()?;
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = LaneModel::from_checkpoint(&ckpt)?;
    let image = GrayImage::read_pgm(&args.image)?;
    let x = model.image_tensor(&image)?;
    let cfg = model.config();
    let (fh, fw) = cfg.feature_size();

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &x)?;
    let (node, row, stem) = match (args.pixel, args.slot) {
        (Some((r, c)), _) => {
            if r >= fh || c >= fw {
                bail!("cell ({r}, {c}) is outside the {fh}x{fw} feature grid");
            }
            let last = *fwd.encoder.attention.last().context("model has no encoder layers")?;
            (last, r * fw + c, format!("encoder_r{r}_c{c}"))
        }
        (None, Some(k)) => {
            if k >= cfg.queries {
                bail!("slot {k} is out of range; the model has {} slots", cfg.queries);
            }
            let last = *fwd.decoder.cross_attention.last().context("model has no decoder layers")?;
            (last, k, format!("slot_{k}"))
        }
        (None, None) => bail!("pass --pixel ROW,COL or --slot K"),
    };
    let values = attention_row(&g, node, row)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let map_path = out.join(format!("attn_{stem}.pgm"));
    to_graymap(&values, fw, fh)?.write_pgm(&map_path)?;
    let mut text = String::new();
    for line in values.chunks(fw) {
        let cells: Vec<String> = line.iter().map(f64::to_string).collect();
        writeln!(text, "{}", cells.join(" ")).expect("writing to a string");
    }
    let values_path = out.join(format!("attn_{stem}.txt"));
    fs::write(&values_path, text).with_context(|| format!("writing {}", values_path.display()))?;

    emit(&json!({
        "event": "attn",
        "map": map_path,
        "values": values_path,
        "height": fh,
        "width": fw,
        "sum": values.iter().sum::<f64>(),
        "top_decile_mass": top_decile_mass(&values),
    }));
    Ok(())
}

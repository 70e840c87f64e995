use std::time::Instant;

use anyhow::{bail, Result};
use lanetr_core::autograd::{Graph, Tensor};
use lanetr_core::model::{model_macs, LaneModel, ModelConfig};
use serde_json::json;

use crate::log::emit;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Timed forward passes; overrides `bench.repetitions`.
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Untimed warm-up passes; overrides `bench.warmup`.
    #[arg(long)]
    pub warmup: Option<usize>,
}

/// Attention MACs after doubling the input width, relative to the original.
pub fn attention_doubling_ratio(cfg: &ModelConfig) -> f64 {
    let doubled = ModelConfig {
        input_w: cfg.input_w * 2,
        ..cfg.clone()
    };
    model_macs(&doubled).attention as f64 / model_macs(cfg).attention as f64
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let reps = args.repetitions.unwrap_or(ctx.config.bench.repetitions);
    let warmup = args.warmup.unwrap_or(ctx.config.bench.warmup);
    if reps == 0 {
        bail!("repetitions must be at least 1");
    }
    let cfg = &ctx.config.model;
    let model = LaneModel::new(cfg.clone(), ctx.seed.or(ctx.config.seed).unwrap_or(0))?;
    let (h, w) = (cfg.input_h, cfg.input_w);
    let image = Tensor::from_fn(&[1, h, w], |i| ((i % w) as f64 / w as f64 - 0.5) * 2.0);

    let mut times = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let t0 = Instant::now();
        let mut g = Graph::new();
        model.forward(&mut g, &image)?;
        if i >= warmup {
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
    emit(&json!({
        "event": "bench",
        "input": [h, w],
        "repetitions": reps,
        "mean_ms": mean,
        "std_ms": var.sqrt(),
        "fps": 1e3 / mean,
        "macs": model_macs(cfg),
        "attention_doubling_ratio": attention_doubling_ratio(cfg),
    }));
    Ok(())
}

use anyhow::{Context as _, Result};
use lanetr_core::data::{synth_generate, write_dataset};
use serde_json::json;

use crate::log::emit;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of scenes; overrides `data.n_scenes`.
    #[arg(long)]
    pub n: Option<usize>,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let seed = ctx.config.require_seed(ctx.seed)?;
    let out = ctx.out_dir()?;
    let n = args.n.unwrap_or(ctx.config.data.n_scenes);
    let scenes = synth_generate(seed, n, &ctx.config.gen)?;
    let manifest = write_dataset(out, seed, &ctx.config.gen, &scenes)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    let lanes: usize = scenes.iter().map(|s| s.params.len()).sum();
    emit(&json!({
        "event": "synth",
        "dir": out,
        "seed": seed,
        "n_scenes": manifest.n_scenes,
        "lanes": lanes,
    }));
    Ok(())
}

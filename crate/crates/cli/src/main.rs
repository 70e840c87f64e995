//! `lanetr`: synthetic data, curve fitting, training, evaluation, attention
//! dumps and benchmarks for the lane shape transformer.

mod attn;
mod bench;
mod config;
mod eval;
mod fit;
mod log;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lanetr", version, about = "Lane shape prediction with transformers")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(synth::Args),
    /// Fit the lane shape model to line-delimited annotations.
    Fit(fit::Args),
    /// Train a model on a synthetic dataset.
    Train(train::Args),
    /// Evaluate a checkpoint, or the ground truth itself, on a dataset.
    Eval(eval::Args),
    /// Dump an encoder or decoder attention map.
    Attn(attn::Args),
    /// Time the forward pass and count multiply-accumulates.
    Bench(bench::Args),
}

/// Values shared by every command.
pub struct Context {
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn out_dir(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("this command needs --out DIR"))
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context {
        config: RunConfig::load(cli.config.as_deref(), &cli.overrides)?,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Synth(a) => synth::run(&ctx, &a),
        Command::Fit(a) => fit::run(&ctx, &a),
        Command::Train(a) => train::run(&ctx, &a),
        Command::Eval(a) => eval::run(&ctx, &a),
        Command::Attn(a) => attn::run(&ctx, &a),
        Command::Bench(a) => bench::run(&ctx, &a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Run configuration: one TOML file with flat dotted keys plus `key=value`
//! overrides from the command line.
//!
//! ```toml
//! seed = 7
//! model.hidden = 32
//! train.batch_size = 8
//! gen.lanes = [2, 5]
//! data.train = "runs/train"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lanetr_core::data::GenConfig;
use lanetr_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub data: DataConfig,
    pub run: RunOptions,
    pub fit: FitConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scenes written by `synth`.
    pub n_scenes: usize,
    /// Training dataset directory.
    pub train: Option<PathBuf>,
    /// Held-out dataset evaluated during training.
    pub eval: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_scenes: 500,
            train: None,
            eval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Held-out evaluation interval in steps; 0 disables it.
    pub eval_every: u64,
    /// Wall-clock training budget in seconds; 0 disables it.
    pub max_seconds: f64,
    /// Evaluation threshold in pixels; defaults to 20 px scaled from 720 rows.
    pub threshold_px: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            log_every: 10,
            checkpoint_every: 1000,
            eval_every: 0,
            max_seconds: 0.0,
            threshold_px: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub share_shape: bool,
    pub cubic: bool,
    /// Image height of the annotations; defaults to `gen.height`.
    pub image_height: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            share_shape: true,
            cubic: true,
            image_height: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 20,
            warmup: 3,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()?;
        if self.run.log_every == 0 || self.run.checkpoint_every == 0 {
            bail!("run.log_every and run.checkpoint_every must be positive");
        }
        if !(self.run.max_seconds >= 0.0) {
            bail!("run.max_seconds must be nonnegative");
        }
        if self.run.threshold_px.is_some_and(|t| !(t > 0.0)) {
            bail!("run.threshold_px must be positive");
        }
        Ok(())
    }

    /// Seed from the command line, else from the file.
    pub fn require_seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed)
            .context("a seed is required: pass --seed or set `seed` in the config")
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("override `{item}` is not of the form key=value");
    };
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{part}` is not a table"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\nmodel.queries = 5\ntrain.weights.w1 = 1.5\ngen.lanes = [2, 4]\n").unwrap();
        let c = RunConfig::load(
            Some(&path),
            &["train.lr=0.001".into(), "data.train=runs/a".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.model.queries, 5);
        assert_eq!(c.train.weights.w1, 1.5);
        assert_eq!(c.train.weights.w2, 5.0);
        assert_eq!(c.gen.lanes, (2, 4));
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.data.train, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["model.hiden=3", "colour=1", "train.weights.w4=1"] {
            assert!(RunConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
        assert!(RunConfig::load(None, &["gen.pitch=[-0.5, 0.1]".into()]).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig::default();
        assert!(c.require_seed(None).is_err());
        c.seed = Some(1);
        assert_eq!(c.require_seed(None).unwrap(), 1);
        assert_eq!(c.require_seed(Some(2)).unwrap(), 2);
    }
}

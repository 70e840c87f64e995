//! Training loop: Hungarian loss on every decoder layer, Adam updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prediction_set, LaneModel};
use crate::autograd::{Adam, AdamConfig, Checkpoint, Graph, Tensor, Var};
use crate::data::{augment, AugmentOps, Sample};
use crate::error::{Error, Result};
use crate::matching::{hungarian_fitting_loss_with, GroundTruthSet, LossWeights, SingularRows};

/// Offset separating the augmentation streams from the shuffling streams.
const AUGMENT_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Step interval of the learning-rate decay; 0 keeps `lr` constant.
    pub lr_decay_every: u64,
    /// Factor applied to the learning rate every `lr_decay_every` steps.
    pub lr_decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub flip_prob: f64,
    /// Uniform zoom range; `(1, 1)` disables scaling.
    pub scale_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            lr: adam.lr,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 0.0,
            weights: LossWeights::default(),
            flip_prob: 0.5,
            scale_range: (1.0, 1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("need lr > 0 and betas in [0, 1)".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must be in (0, 1]".into()));
        }
        if !(self.clip_norm >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("need clip_norm >= 0 and flip_prob in [0, 1]".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range [{lo}, {hi}] is invalid")));
        }
        LossWeights::new(self.weights.w1, self.weights.w2, self.weights.w3)?;
        Ok(())
    }

    /// Learning rate for the update that follows `steps_done` updates.
    pub fn lr_at(&self, steps_done: u64) -> f64 {
        match self.lr_decay_every {
            0 => self.lr,
            every => self.lr * self.lr_decay_factor.powi((steps_done / every).min(i32::MAX as u64) as i32),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Loss graph of one image.
pub struct ImageLoss {
    pub graph: Graph,
    pub loss: Var,
    /// Loss of each decoder layer.
    pub per_layer: Vec<f64>,
}

/// Builds the summed Hungarian loss over decoder layers for one image.
/// `gts` must already be padded to the slot count.
pub fn image_loss(model: &LaneModel, image: &Tensor, gts: &GroundTruthSet, w: &LossWeights) -> Result<ImageLoss> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, image)?;
    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(out.heads.len());
    for head in &out.heads {
        let preds = prediction_set(&g, head)?;
        let fit = hungarian_fitting_loss_with(&preds, gts, w, SingularRows::Perturb)?;
        let prob_grad: Vec<f64> = fit.grads.iter().flat_map(|p| p.probs).collect();
        let param_grad: Vec<f64> = fit.grads.iter().flat_map(|p| p.params).collect();
        let l = g.external(&[head.probs, head.params], fit.loss, vec![prob_grad, param_grad])?;
        per_layer.push(fit.loss);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(ImageLoss {
        graph: g,
        loss: total.expect("at least one decoder layer"),
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Steps completed, including this one.
    pub step: u64,
    /// Batch mean of the loss before the update.
    pub loss: f64,
    /// Batch mean of the last decoder layer's loss.
    pub last_layer_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: LaneModel,
    pub config: TrainConfig,
    adam: Adam,
    seed: u64,
}

impl Trainer {
    pub fn new(model: LaneModel, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam(), model.store());
        Ok(Trainer {
            model,
            config,
            adam,
            seed,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.steps()
    }

    /// One update on `batch` (images with padded ground truth). Gradients are
    /// averaged over the batch.
    pub fn train_step(&mut self, batch: &[(Tensor, GroundTruthSet)]) -> Result<StepInfo> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        self.model.store_mut().zero_grad();
        let mut loss = 0.0;
        let mut last = 0.0;
        for (image, gts) in batch {
            let mut il = image_loss(&self.model, image, gts, &self.config.weights)?;
            let scaled = il.graph.scale(il.loss, inv);
            il.graph.backward(scaled, self.model.store_mut())?;
            loss += il.graph.scalar(il.loss) * inv;
            last += il.per_layer.last().copied().unwrap_or(0.0) * inv;
        }
        self.adam.config.lr = self.config.lr_at(self.adam.steps());
        self.adam.step(self.model.store_mut());
        Ok(StepInfo {
            step: self.adam.steps(),
            loss,
            last_layer_loss: last,
        })
    }

    /// Sample indices for `step`, walking seeded per-epoch permutations.
    pub fn batch_indices(&self, n_samples: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..b as u64 {
            let global = step * b as u64 + i;
            let epoch = global / n_samples as u64;
            let pos = (global % n_samples as u64) as usize;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..n_samples).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled").1[pos]);
        }
        out
    }

    /// Augmented batch for `step`.
    pub fn batch(&self, samples: &[Sample], step: u64) -> Result<Vec<(Tensor, GroundTruthSet)>> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let n = self.model.config().queries;
        self.batch_indices(samples.len(), step)
            .into_iter()
            .enumerate()
            .map(|(i, idx)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(AUGMENT_STREAM + step * self.config.batch_size as u64 + i as u64);
                let (lo, hi) = self.config.scale_range;
                let ops = AugmentOps {
                    flip: rng.random_bool(self.config.flip_prob),
                    scale: if lo == hi { lo } else { rng.random_range(lo..=hi) },
                };
                let s = &samples[idx];
                let (image, gts) = augment(&s.image, &s.gts, &ops);
                Ok((self.model.image_tensor(&image)?, gts.padded_to(n)?))
            })
            .collect()
    }

    /// Trains until `steps_done() == until`, calling `on_step` after each update.
    pub fn run<F>(&mut self, samples: &[Sample], until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepInfo) -> Result<()>,
    {
        while self.steps_done() < until {
            let batch = self.batch(samples, self.steps_done())?;
            let info = self.train_step(&batch)?;
            on_step(self, &info)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.meta["train"] = serde_json::to_value(&self.config).expect("serializable");
        ckpt.meta["step"] = self.adam.steps().into();
        ckpt.meta["seed"] = self.seed.into();
        ckpt.tensors.extend(self.adam.state(self.model.store()));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = LaneModel::from_checkpoint(ckpt)?;
        let missing = |f: &str| Error::Checkpoint(format!("checkpoint has no training field `{f}`"));
        let config: TrainConfig = serde_json::from_value(ckpt.meta.get("train").cloned().ok_or_else(|| missing("train"))?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = ckpt.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| missing("step"))?;
        let seed = ckpt.meta.get("seed").and_then(|v| v.as_u64()).ok_or_else(|| missing("seed"))?;
        let adam = Adam::restore(config.adam(), model.store(), step, &ckpt.tensors)?;
        Ok(Trainer {
            model,
            config,
            adam,
            seed,
        })
    }
}

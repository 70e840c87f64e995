use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel count `C` of the transformer.
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Prediction slots `N`.
    pub queries: usize,
    /// Output channels of each backbone stage; the last must equal `hidden`.
    pub backbone_channels: Vec<usize>,
    /// Product of the backbone strides. The first `log2(downsample)` stages
    /// have stride 2, the rest stride 1.
    pub downsample: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Average `(k'', f'', m'', n')` over slots.
    pub share_shape: bool,
    /// Inner width of the transformer feed-forward blocks, as a multiple of `hidden`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            queries: 7,
            backbone_channels: vec![8, 16, 32, 32],
            downsample: 8,
            input_h: 128,
            input_w: 256,
            share_shape: true,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return err(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.hidden % 4 != 0 {
            return err(format!("hidden ({}) must be divisible by 4", self.hidden));
        }
        if self.queries == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return err("queries, dec_layers and ffn_mult must be positive".into());
        }
        if !self.downsample.is_power_of_two() {
            return err(format!("downsample ({}) must be a power of two", self.downsample));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return err("backbone_channels must be nonempty and positive".into());
        }
        if self.stride2_stages() > self.backbone_channels.len() {
            return err(format!(
                "downsample {} needs {} stride-2 stages, backbone has {}",
                self.downsample,
                self.stride2_stages(),
                self.backbone_channels.len()
            ));
        }
        if self.backbone_channels.last() != Some(&self.hidden) {
            return err(format!(
                "last backbone channel count must equal hidden ({})",
                self.hidden
            ));
        }
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % self.downsample != 0
            || self.input_w % self.downsample != 0
        {
            return err(format!(
                "input {}x{} must be divisible by downsample {}",
                self.input_h, self.input_w, self.downsample
            ));
        }
        Ok(())
    }

    pub fn stride2_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        if stage < self.stride2_stages() {
            2
        } else {
            1
        }
    }

    /// Feature map size `(H, W)` after the backbone.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_h / self.downsample, self.input_w / self.downsample)
    }

    pub fn sequence_len(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }
}

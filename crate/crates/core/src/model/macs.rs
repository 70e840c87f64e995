use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Multiply-accumulate counts of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacReport {
    pub backbone: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub heads: u64,
    /// Score and mixing products of every attention block (part of the
    /// encoder and decoder counts).
    pub attention: u64,
    pub total: u64,
}

pub fn conv_macs(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (c_in * c_out * k * k * h_out * w_out) as u64
}

pub fn linear_macs(rows: usize, c_in: usize, c_out: usize) -> u64 {
    (rows * c_in * c_out) as u64
}

/// `Q K^T` plus `A V` for `nq` queries over `nk` keys of width `c`.
pub fn attention_macs(nq: usize, nk: usize, c: usize) -> u64 {
    2 * (nq * nk * c) as u64
}

pub fn model_macs(cfg: &ModelConfig) -> MacReport {
    let mut r = MacReport::default();
    let (mut h, mut w, mut cin) = (cfg.input_h, cfg.input_w, 1);
    for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
        let s = cfg.stage_stride(i);
        h = (h - 1) / s + 1;
        w = (w - 1) / s + 1;
        r.backbone += conv_macs(cin, cout, 3, h, w) + conv_macs(cout, cout, 3, h, w);
        cin = cout;
    }
    let c = cfg.hidden;
    let hw = cfg.sequence_len();
    let n = cfg.queries;
    let ffn = c * cfg.ffn_mult;

    let enc_attn = attention_macs(hw, hw, c);
    r.encoder = cfg.enc_layers as u64
        * (4 * linear_macs(hw, c, c) + enc_attn + linear_macs(hw, c, ffn) + linear_macs(hw, ffn, c));
    let dec_attn = attention_macs(n, n, c) + attention_macs(n, hw, c);
    r.decoder = cfg.dec_layers as u64
        * (4 * linear_macs(n, c, c)
            + 2 * linear_macs(n, c, c)
            + 2 * linear_macs(hw, c, c)
            + dec_attn
            + linear_macs(n, c, ffn)
            + linear_macs(n, ffn, c));
    r.attention = cfg.enc_layers as u64 * enc_attn + cfg.dec_layers as u64 * dec_attn;
    let perceptron = 2 * linear_macs(n, c, c) + linear_macs(n, c, 4);
    r.heads = cfg.dec_layers as u64 * (linear_macs(n, c, 2) + 2 * perceptron);
    r.total = r.backbone + r.encoder + r.decoder + r.heads;
    r
}

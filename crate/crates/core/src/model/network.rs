//! Backbone, transformer encoder/decoder and prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_positional_embedding, ModelConfig, OutputCodec};
use crate::autograd::{Checkpoint, Graph, ParameterStore, Tensor, Var};
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::{TiltedCurveParams, TILTED_PARAM_COUNT};
use crate::matching::{Prediction, PredictionSet};

const PIXEL_MEAN: f64 = 127.5;
const PIXEL_SCALE: f64 = 64.0;

/// Lane embedding parameter name, shape `[N, C]`.
pub const LANE_EMBEDDING: &str = "lane_embedding";

/// Network outputs of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N, 2]` class distribution `(non-lane, lane)`.
    pub probs: Var,
    /// `[N, 8]` curve parameters in pixels, in [`TiltedCurveParams`] field order.
    pub params: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub memory: Var,
    /// Self-attention node of each layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Slot sequence `[N, C]` after each layer.
    pub layers: Vec<Var>,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One entry per decoder layer; the last is the inference output.
    pub heads: Vec<HeadOutput>,
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneModel {
    config: ModelConfig,
    store: ParameterStore,
    codec: OutputCodec,
    pos: Tensor,
}

impl LaneModel {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero,
    /// layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let c = config.hidden;
        let ffn = c * config.ffn_mult;

        let mut cin = 1;
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            let p = format!("backbone.{i}");
            store.insert_uniform(format!("{p}.conv1.w"), &[cout, cin, 3, 3], cin * 9, &mut rng)?;
            store.insert(format!("{p}.conv1.b"), Tensor::zeros(&[cout]))?;
            store.insert_uniform(format!("{p}.conv2.w"), &[cout, cout, 3, 3], cout * 9, &mut rng)?;
            store.insert(format!("{p}.conv2.b"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }

        let linear = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            store.insert_uniform(format!("{name}.w"), &[i, o], i, rng)?;
            store.insert(format!("{name}.b"), Tensor::zeros(&[o]))
        };
        let norm = |store: &mut ParameterStore, name: &str| {
            store.insert(format!("{name}.g"), Tensor::filled(&[c], 1.0))?;
            store.insert(format!("{name}.b"), Tensor::zeros(&[c]))
        };
        let attention = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str| -> Result<()> {
            for proj in ["q", "k", "v", "o"] {
                linear(store, rng, &format!("{name}.{proj}"), c, c)?;
            }
            Ok(())
        };
        let feed_forward = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str| -> Result<()> {
            linear(store, rng, &format!("{name}.1"), c, ffn)?;
            linear(store, rng, &format!("{name}.2"), ffn, c)?;
            Ok(())
        };

        for l in 0..config.enc_layers {
            let p = format!("encoder.{l}");
            attention(&mut store, &mut rng, &format!("{p}.attn"))?;
            norm(&mut store, &format!("{p}.norm1"))?;
            feed_forward(&mut store, &mut rng, &format!("{p}.ffn"))?;
            norm(&mut store, &format!("{p}.norm2"))?;
        }
        store.insert_uniform(LANE_EMBEDDING, &[config.queries, c], 1, &mut rng)?;
        for l in 0..config.dec_layers {
            let p = format!("decoder.{l}");
            attention(&mut store, &mut rng, &format!("{p}.self_attn"))?;
            norm(&mut store, &format!("{p}.norm1"))?;
            attention(&mut store, &mut rng, &format!("{p}.cross_attn"))?;
            norm(&mut store, &format!("{p}.norm2"))?;
            feed_forward(&mut store, &mut rng, &format!("{p}.ffn"))?;
            norm(&mut store, &format!("{p}.norm3"))?;
        }
        linear(&mut store, &mut rng, "head.class", c, 2)?;
        for head in ["head.lane", "head.shape"] {
            linear(&mut store, &mut rng, &format!("{head}.0"), c, c)?;
            linear(&mut store, &mut rng, &format!("{head}.1"), c, c)?;
            linear(&mut store, &mut rng, &format!("{head}.2"), c, 4)?;
        }

        let (fh, fw) = config.feature_size();
        let pos = build_positional_embedding(fh, fw, c)?;
        let codec = OutputCodec::identity(config.input_w as f64, config.input_h as f64);
        Ok(LaneModel {
            config,
            store,
            codec,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn codec(&self) -> &OutputCodec {
        &self.codec
    }

    pub fn set_codec(&mut self, codec: OutputCodec) {
        self.codec = codec;
    }

    pub fn positional_embedding(&self) -> &Tensor {
        &self.pos
    }

    /// `[1, H, W]` input tensor for a grayscale image.
    pub fn image_tensor(&self, image: &GrayImage) -> Result<Tensor> {
        if image.height() != self.config.input_h || image.width() != self.config.input_w {
            return Err(Error::Shape(format!(
                "model expects {}x{} images, got {}x{}",
                self.config.input_w,
                self.config.input_h,
                image.width(),
                image.height()
            )));
        }
        Tensor::new(
            vec![1, image.height(), image.width()],
            image
                .pixels()
                .iter()
                .map(|&p| (f64::from(p) - PIXEL_MEAN) / PIXEL_SCALE)
                .collect(),
        )
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(&self.store, name)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{name}.g"))?;
        let bias = self.p(g, &format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention block with input and output projections.
    /// Returns `(output, attention node)`.
    fn attention(&self, g: &mut Graph, q: Var, k: Var, v: Var, name: &str) -> Result<(Var, Var)> {
        let q = self.linear(g, q, &format!("{name}.q"))?;
        let k = self.linear(g, k, &format!("{name}.k"))?;
        let v = self.linear(g, v, &format!("{name}.v"))?;
        let a = g.attention(q, k, v, self.config.heads)?;
        Ok((self.linear(g, a, &format!("{name}.o"))?, a))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{name}.1"))?;
        let h = g.relu(h);
        self.linear(g, h, &format!("{name}.2"))
    }

    /// Residual convolution stages, flattened to a `[H*W, C]` sequence.
    pub fn backbone_forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let shape = g.value(image).shape().to_vec();
        let ds = self.config.downsample;
        match shape[..] {
            [1, h, w] if h % ds == 0 && w % ds == 0 => {}
            _ => {
                return Err(Error::Shape(format!(
                    "backbone input {shape:?} must be [1, H, W] with H, W divisible by {ds}"
                )))
            }
        }
        let mut x = image;
        for i in 0..self.config.backbone_channels.len() {
            let p = format!("backbone.{i}");
            let w1 = self.p(g, &format!("{p}.conv1.w"))?;
            let b1 = self.p(g, &format!("{p}.conv1.b"))?;
            let h = g.conv2d(x, w1, self.config.stage_stride(i))?;
            let h = g.add_channel_bias(h, b1)?;
            let h = g.relu(h);
            let w2 = self.p(g, &format!("{p}.conv2.w"))?;
            let b2 = self.p(g, &format!("{p}.conv2.b"))?;
            let r = g.conv2d(h, w2, 1)?;
            let r = g.add_channel_bias(r, b2)?;
            let sum = g.add(h, r)?;
            x = g.relu(sum);
        }
        let s = g.value(x).shape().to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        g.transpose(flat)
    }

    /// Post-norm encoder layers. Queries and keys receive `pos`, values do not.
    pub fn encoder_forward(&self, g: &mut Graph, s: Var, pos: Var) -> Result<EncoderOutput> {
        let mut x = s;
        let mut attention = Vec::with_capacity(self.config.enc_layers);
        for l in 0..self.config.enc_layers {
            let p = format!("encoder.{l}");
            let qk = g.add(x, pos)?;
            let (a, map) = self.attention(g, qk, qk, x, &format!("{p}.attn"))?;
            attention.push(map);
            let r = g.add(x, a)?;
            x = self.norm(g, r, &format!("{p}.norm1"))?;
            let f = self.feed_forward(g, x, &format!("{p}.ffn"))?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, &format!("{p}.norm2"))?;
        }
        Ok(EncoderOutput {
            memory: x,
            attention,
        })
    }

    /// Decoder over `N` slots starting from zeros. The lane embedding is added
    /// to slot queries and keys; `pos` is added to memory keys.
    pub fn decoder_forward(&self, g: &mut Graph, memory: Var, pos: Var) -> Result<DecoderOutput> {
        let n = self.config.queries;
        let c = self.config.hidden;
        let lane = self.p(g, LANE_EMBEDDING)?;
        let mut x = g.input(Tensor::zeros(&[n, c]));
        let mem_keys = g.add(memory, pos)?;
        let mut out = DecoderOutput {
            layers: Vec::with_capacity(self.config.dec_layers),
            self_attention: Vec::new(),
            cross_attention: Vec::new(),
        };
        for l in 0..self.config.dec_layers {
            let p = format!("decoder.{l}");
            let qk = g.add(x, lane)?;
            let (a, map) = self.attention(g, qk, qk, x, &format!("{p}.self_attn"))?;
            out.self_attention.push(map);
            let r = g.add(x, a)?;
            x = self.norm(g, r, &format!("{p}.norm1"))?;

            let q = g.add(x, lane)?;
            let (a, map) = self.attention(g, q, mem_keys, memory, &format!("{p}.cross_attn"))?;
            out.cross_attention.push(map);
            let r = g.add(x, a)?;
            x = self.norm(g, r, &format!("{p}.norm2"))?;

            let f = self.feed_forward(g, x, &format!("{p}.ffn"))?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, &format!("{p}.norm3"))?;
            out.layers.push(x);
        }
        Ok(out)
    }

    fn perceptron(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{name}.0"))?;
        let h = g.relu(h);
        let h = self.linear(g, h, &format!("{name}.1"))?;
        let h = g.relu(h);
        self.linear(g, h, &format!("{name}.2"))
    }

    /// Class, lane-specific and shape heads on one slot sequence.
    pub fn heads_forward(&self, g: &mut Graph, slots: Var, share_shape: bool) -> Result<HeadOutput> {
        let logits = self.linear(g, slots, "head.class")?;
        let probs = g.softmax_rows(logits)?;

        let lane = self.perceptron(g, slots, "head.lane")?;
        let offsets = g.slice_cols(lane, 0, 2)?;
        let bounds = g.slice_cols(lane, 2, 2)?;
        let bounds = g.sigmoid(bounds);

        let mut shape = self.perceptron(g, slots, "head.shape")?;
        if share_shape {
            let n = g.value(slots).shape()[0];
            let mean = g.mean_rows(shape)?;
            shape = g.broadcast_rows(mean, n)?;
        }
        let raw = g.concat_cols(&[shape, offsets, bounds])?;
        let (scale, offset) = self.codec.affine();
        let params = g.affine_cols(raw, &scale, &offset)?;
        Ok(HeadOutput { probs, params })
    }

    /// Forward pass with an explicit positional embedding (tests zero it).
    pub fn forward_with_pos(&self, g: &mut Graph, image: &Tensor, pos: &Tensor) -> Result<ForwardOutput> {
        let x = g.input(image.clone());
        let s = self.backbone_forward(g, x)?;
        let pos = g.input(pos.clone());
        let encoder = self.encoder_forward(g, s, pos)?;
        let decoder = self.decoder_forward(g, encoder.memory, pos)?;
        let heads = decoder
            .layers
            .iter()
            .map(|&slots| self.heads_forward(g, slots, self.config.share_shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            heads,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOutput> {
        self.forward_with_pos(g, image, &self.pos)
    }

    /// One prediction set per decoder layer; the last is the inference output.
    /// Slots with `alpha > beta` get the two boundaries swapped.
    pub fn model_forward(&self, image: &GrayImage) -> Result<Vec<PredictionSet>> {
        let x = self.image_tensor(image)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &x)?;
        out.heads
            .iter()
            .map(|h| {
                let mut set = prediction_set(&g, h)?;
                set.order_boundaries();
                Ok(set)
            })
            .collect()
    }

    /// Final-layer predictions.
    pub fn predict(&self, image: &GrayImage) -> Result<PredictionSet> {
        Ok(self.model_forward(image)?.pop().expect("at least one decoder layer"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({
                "model": self.config,
                "codec": self.codec,
            }),
            tensors: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape")))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: ModelConfig =
            serde_json::from_value(ckpt.meta.get("model").cloned().unwrap_or_default()).map_err(bad)?;
        let codec: OutputCodec =
            serde_json::from_value(ckpt.meta.get("codec").cloned().unwrap_or_default()).map_err(bad)?;
        let mut model = LaneModel::new(config, 0)?;
        let params: Vec<(String, Tensor)> = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| model.store.id(n).is_some())
            .cloned()
            .collect();
        model.store.load_values(&params)?;
        model.codec = codec;
        Ok(model)
    }
}

/// Reads a [`PredictionSet`] off the values of a head output.
pub fn prediction_set(g: &Graph, head: &HeadOutput) -> Result<PredictionSet> {
    let probs = g.value(head.probs);
    let params = g.value(head.params);
    let n = probs.shape()[0];
    let items = (0..n)
        .map(|i| {
            let p = probs.row(i);
            let a: [f64; TILTED_PARAM_COUNT] = params.row(i).try_into().expect("8 columns");
            Prediction {
                probs: [p[0], p[1]],
                params: TiltedCurveParams::from_array(a),
            }
        })
        .collect();
    PredictionSet::new(items)
}

/// Head-averaged attention row `row` of an attention node.
pub fn attention_row(g: &Graph, attention: Var, row: usize) -> Result<Vec<f64>> {
    let maps = g
        .attention_map(attention)
        .ok_or_else(|| Error::Shape("not an attention node".into()))?;
    let (heads, nq, nk) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    if row >= nq {
        return Err(Error::Domain(format!("attention row {row} out of range (< {nq})")));
    }
    let mut out = vec![0.0; nk];
    for h in 0..heads {
        let start = (h * nq + row) * nk;
        for (o, v) in out.iter_mut().zip(&maps.data()[start..start + nk]) {
            *o += v / heads as f64;
        }
    }
    Ok(out)
}

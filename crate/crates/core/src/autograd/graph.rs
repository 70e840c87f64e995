//! Tape of forward operations with reverse-mode gradient propagation.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and adds
//! the gradients of parameter leaves into the [`ParameterStore`].

use std::cmp::Ordering;
use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, softmax_in_place, MatRef};
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AffineCols {
        x: Var,
        scale: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    AddChannelBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Attention(Box<AttentionCache>),
    Sum(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    External {
        inputs: Vec<Var>,
        grads: Vec<Vec<f64>>,
    },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Key rows in the canonical order used for the forward reductions.
    order: Vec<usize>,
    /// Per-head attention maps `[heads, nq, nk]` in canonical key order.
    attn: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter. Binding the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.by_id(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.push(value, Op::Param(id));
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, p) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m}x{k}] x [{k2}x{p}]")));
        }
        let mut out = vec![0.0; m * p];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, p),
            &mut out,
            p,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`P` vector to every row of an `[M, P]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, p) = self.dims2(a)?;
        if self.value(row).len() != p {
            return Err(Error::Shape(format!(
                "add_row: row of {} values for {p} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(p)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Per-column affine map `offset[c] + scale[c] * x` with constant coefficients.
    pub fn affine_cols(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Result<Var> {
        let (_, p) = self.dims2(x)?;
        if scale.len() != p || offset.len() != p {
            return Err(Error::Shape(format!("affine_cols: {p} columns")));
        }
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(p)
            .flat_map(|row| {
                row.iter()
                    .zip(scale.iter().zip(offset))
                    .map(|(v, (s, o))| o + s * v)
            })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::AffineCols {
                x,
                scale: scale.to_vec(),
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, p) = self.dims2(a)?;
        let mut t = self.value(a).clone();
        t.data_mut().chunks_mut(p).for_each(softmax_in_place);
        Ok(self.push(t, Op::SoftmaxRows(a)))
    }

    /// Per-row normalization to zero mean and unit variance followed by
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, p) = self.dims2(x)?;
        if self.value(gain).len() != p || self.value(bias).len() != p {
            return Err(Error::Shape(format!("layer_norm over {p} columns")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * p];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * p];
        for r in 0..m {
            let row = &xv[r * p..(r + 1) * p];
            let mean = row.iter().sum::<f64>() / p as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for c in 0..p {
                let h = (row[c] - mean) * inv;
                xhat[r * p + c] = h;
                out[r * p + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vec![m, p], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Cross-correlation of a `[C_in, H, W]` image with a
    /// `[C_out, C_in, kh, kw]` kernel, zero padding `kh / 2`, then stride.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (&[ci, h, w], &[co, ci2, kh, kw]) = (&xs[..], &ks[..]) else {
            return Err(Error::Shape(format!("conv2d input {xs:?}, kernel {ks:?}")));
        };
        if ci != ci2 || stride == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?}, kernel {ks:?}, stride {stride}"
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        if ph != pw {
            return Err(Error::Shape("conv2d needs a square kernel".into()));
        }
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (w + 2 * pw - kw) / stride + 1;
        let cols = im2col(self.value(x).data(), ci, h, w, kh, kw, stride, ph, ho, wo);
        let r = ci * kh * kw;
        let mut out = vec![0.0; co * ho * wo];
        gemm(
            MatRef::new(self.value(kernel).data(), co, r),
            MatRef::new(&cols, r, ho * wo),
            &mut out,
            ho * wo,
            0.0,
        );
        let t = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                stride,
                cols,
            },
        ))
    }

    /// Adds `bias[c]` to every pixel of channel `c` of a `[C, H, W]` image.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [c, h, w] = xs[..] else {
            return Err(Error::Shape(format!("channel bias on {xs:?}")));
        };
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!("channel bias of {} for {c} channels", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(b)
            .flat_map(|(plane, bc)| plane.iter().map(move |v| v + bc))
            .collect();
        Ok(self.push(Tensor::new(xs, data)?, Op::AddChannelBias(x, bias)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Multi-head scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`
    /// with head width `d = C / heads`. Queries, keys and values are split into
    /// contiguous column blocks per head and the head outputs concatenated.
    ///
    /// Key/value rows are reduced in a content-defined order, so permuting the
    /// key rows leaves every output bit-identical.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, c) = self.dims2(q)?;
        let (nk, ck) = self.dims2(k)?;
        let (nv, cv) = self.dims2(v)?;
        if ck != c || cv != c || nv != nk || heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q [{nq}x{c}], k [{nk}x{ck}], v [{nv}x{cv}], {heads} heads"
            )));
        }
        let d = c / heads;
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let order = canonical_row_order(kv, vv, nk, c);
        let kc = gather_rows(kv, &order, c);
        let vc = gather_rows(vv, &order, c);
        let qv = self.value(q).data();
        let scale = 1.0 / (d as f64).sqrt();

        let mut attn = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * c];
        for h in 0..heads {
            let a = &mut attn[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                MatRef::new(qv, nq, c).cols_slice(h * d, d),
                MatRef::new(&kc, nk, c).cols_slice(h * d, d).t(),
                a,
                nk,
                0.0,
            );
            for row in a.chunks_mut(nk) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(
                MatRef::new(a, nq, nk),
                MatRef::new(&vc, nk, c).cols_slice(h * d, d),
                &mut out[h * d..],
                c,
                0.0,
            );
        }
        let t = Tensor::new(vec![nq, c], out)?;
        Ok(self.push(
            t,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                order,
                attn,
            })),
        ))
    }

    /// Attention maps `[heads, nq, nk]` of an attention node, columns in the
    /// original key order.
    pub fn attention_map(&self, v: Var) -> Option<Tensor> {
        let Op::Attention(cache) = &self.nodes[v.0].op else {
            return None;
        };
        let nq = self.value(cache.q).shape()[0];
        let nk = cache.order.len();
        let mut out = vec![0.0; cache.attn.len()];
        for (src, dst) in cache.attn.chunks(nk).zip(out.chunks_mut(nk)) {
            for (pos, &orig) in cache.order.iter().enumerate() {
                dst[orig] = src[pos];
            }
        }
        Tensor::new(vec![cache.heads, nq, nk], out).ok()
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column means of an `[M, P]` matrix as `[1, P]`. Each column is summed in
    /// sorted order, so the result does not depend on the row order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, p) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut col = vec![0.0; m];
        let out = (0..p)
            .map(|c| {
                for r in 0..m {
                    col[r] = src[r * p + c];
                }
                col.sort_by(f64::total_cmp);
                col.iter().sum::<f64>() / m as f64
            })
            .collect();
        Ok(self.push(Tensor::new(vec![1, p], out)?, Op::MeanRows(a)))
    }

    /// Repeats a `[1, P]` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, p) = self.dims2(a)?;
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_rows of a [{r}x{p}] matrix")));
        }
        let data = self.value(a).data().repeat(m);
        Ok(self.push(Tensor::new(vec![m, p], data)?, Op::BroadcastRows(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, p) = self.dims2(a)?;
        if start + len > p {
            return Err(Error::Shape(format!("columns {start}..{} of {p}", start + len)));
        }
        let data = self
            .value(a)
            .data()
            .chunks(p)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&v| self.dims2(v))
            .collect::<Result<Vec<_>>>()?;
        let m = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::Shape(format!("concat_cols of {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&v, &(_, p)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(v).data()[r * p..(r + 1) * p]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Scalar computed outside the graph, with its gradients with respect to
    /// `inputs` supplied by the caller.
    pub fn external(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != grads.len()
            || inputs
                .iter()
                .zip(&grads)
                .any(|(&v, g)| self.value(v).len() != g.len())
        {
            return Err(Error::Shape("external gradients do not match inputs".into()));
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                grads,
            },
        ))
    }

    /// Reverse pass from a scalar, accumulating parameter gradients into
    /// `store`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParameterStore,
    ) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let n = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.by_id_mut(*id).accumulate_grad(g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let p = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| {
                    gemm(MatRef::new(g, m, p), MatRef::new(bv, k, p).t(), da, k, 1.0)
                });
                acc(*b, &|db| {
                    gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, p), db, p, 1.0)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let p = self.value(*row).len();
                acc(*a, &|da| add_into(da, g));
                acc(*row, &|dr| {
                    for chunk in g.chunks(p) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
            Op::AffineCols { x, scale } => {
                let p = scale.len();
                acc(*x, &|dx| {
                    for (drow, grow) in dx.chunks_mut(p).zip(g.chunks(p)) {
                        for c in 0..p {
                            drow[c] += scale[c] * grow[c];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let y = node.value.data();
                acc(*a, &|da| {
                    for i in 0..da.len() {
                        if y[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let p = node.value.shape()[1];
                let y = node.value.data();
                acc(*a, &|da| {
                    for ((drow, yrow), grow) in da.chunks_mut(p).zip(y.chunks(p)).zip(g.chunks(p)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..p {
                            drow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let p = self.value(*gain).len();
                let gv = self.value(*gain).data();
                acc(*x, &|dx| {
                    let mut dxhat = vec![0.0; p];
                    for (r, (drow, grow)) in dx.chunks_mut(p).zip(g.chunks(p)).enumerate() {
                        let hrow = &xhat[r * p..(r + 1) * p];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..p {
                            dxhat[c] = grow[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hrow[c];
                        }
                        mean_d /= p as f64;
                        mean_dh /= p as f64;
                        for c in 0..p {
                            drow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                });
                acc(*gain, &|dg| {
                    for (grow, hrow) in g.chunks(p).zip(xhat.chunks(p)) {
                        for c in 0..p {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &|db| {
                    for grow in g.chunks(p) {
                        add_into(db, grow);
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let ks = self.value(*kernel).shape();
                let (ci, h, w) = (xs[0], xs[1], xs[2]);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[1], os[2]);
                let r = ci * kh * kw;
                let kv = self.value(*kernel).data();
                acc(*kernel, &|dk| {
                    gemm(
                        MatRef::new(g, co, ho * wo),
                        MatRef::new(cols, r, ho * wo).t(),
                        dk,
                        r,
                        1.0,
                    )
                });
                if !matches!(self.nodes[x.0].op, Op::Input) {
                    acc(*x, &|dx| {
                        let mut dcols = vec![0.0; r * ho * wo];
                        gemm(
                            MatRef::new(kv, co, r).t(),
                            MatRef::new(g, co, ho * wo),
                            &mut dcols,
                            ho * wo,
                            0.0,
                        );
                        col2im(&dcols, dx, ci, h, w, kh, kw, *stride, kh / 2, ho, wo);
                    });
                }
            }
            Op::AddChannelBias(x, bias) => {
                let c = self.value(*bias).len();
                let plane = g.len() / c;
                acc(*x, &|dx| add_into(dx, g));
                acc(*bias, &|db| {
                    for (d, chunk) in db.iter_mut().zip(g.chunks(plane)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                acc(*a, &|da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|da| add_into(da, g)),
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::Sum(a) => acc(*a, &|da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanRows(a) => {
                let (m, p) = self.value(*a).dims2().unwrap();
                acc(*a, &|da| {
                    for row in da.chunks_mut(p) {
                        for c in 0..p {
                            row[c] += g[c] / m as f64;
                        }
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let p = self.value(*a).len();
                acc(*a, &|da| {
                    for chunk in g.chunks(p) {
                        add_into(da, chunk);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let p = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &|dx| {
                    for (drow, grow) in dx.chunks_mut(p).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &part in parts {
                    let p = self.value(part).shape()[1];
                    acc(part, &|dp| {
                        for (drow, grow) in dp.chunks_mut(p).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + p]);
                        }
                    });
                    offset += p;
                }
            }
            Op::External { inputs, grads: ext } => {
                for (&v, eg) in inputs.iter().zip(ext) {
                    acc(v, &|dv| dv.iter_mut().zip(eg).for_each(|(d, e)| *d += g[0] * e));
                }
            }
        }
    }

    fn attention_backward(&self, cache: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (nq, c) = self.value(cache.q).dims2().unwrap();
        let nk = cache.order.len();
        let heads = cache.heads;
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qv = self.value(cache.q).data();
        let kc = gather_rows(self.value(cache.k).data(), &cache.order, c);
        let vc = gather_rows(self.value(cache.v).data(), &cache.order, c);

        let mut dq = vec![0.0; nq * c];
        let mut dkc = vec![0.0; nk * c];
        let mut dvc = vec![0.0; nk * c];
        let mut ds = vec![0.0; nq * nk];
        for h in 0..heads {
            let a = &cache.attn[h * nq * nk..(h + 1) * nq * nk];
            let gh = MatRef::new(g, nq, c).cols_slice(h * d, d);
            // dV = A^T G
            gemm(MatRef::new(a, nq, nk).t(), gh, &mut dvc[h * d..], c, 0.0);
            // dA = G V^T
            gemm(gh, MatRef::new(&vc, nk, c).cols_slice(h * d, d).t(), &mut ds, nk, 0.0);
            for (srow, arow) in ds.chunks_mut(nk).zip(a.chunks(nk)) {
                let dot: f64 = srow.iter().zip(arow).map(|(x, y)| x * y).sum();
                for j in 0..nk {
                    srow[j] = arow[j] * (srow[j] - dot) * scale;
                }
            }
            gemm(
                MatRef::new(&ds, nq, nk),
                MatRef::new(&kc, nk, c).cols_slice(h * d, d),
                &mut dq[h * d..],
                c,
                0.0,
            );
            gemm(
                MatRef::new(&ds, nq, nk).t(),
                MatRef::new(qv, nq, c).cols_slice(h * d, d),
                &mut dkc[h * d..],
                c,
                0.0,
            );
        }
        let mut dk = vec![0.0; nk * c];
        let mut dv = vec![0.0; nk * c];
        for (pos, &orig) in cache.order.iter().enumerate() {
            dk[orig * c..(orig + 1) * c].copy_from_slice(&dkc[pos * c..(pos + 1) * c]);
            dv[orig * c..(orig + 1) * c].copy_from_slice(&dvc[pos * c..(pos + 1) * c]);
        }
        for (var, delta) in [(cache.q, dq), (cache.k, dk), (cache.v, dv)] {
            match grads[var.0].as_mut() {
                Some(slot) => add_into(slot, &delta),
                None => grads[var.0] = Some(delta),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gather_rows(src: &[f64], order: &[usize], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order.len() * c);
    for &r in order {
        out.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
    out
}

/// Row indices sorted by the contents of `(key row, value row)`.
fn canonical_row_order(keys: &[f64], values: &[f64], n: usize, c: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let cmp_rows = |data: &[f64], a: usize, b: usize| -> Ordering {
        data[a * c..(a + 1) * c]
            .iter()
            .zip(&data[b * c..(b + 1) * c])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&a, &b| cmp_rows(keys, a, b).then_with(|| cmp_rows(values, a, b)));
    order
}

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bound, ParamId, ParamKind, ParamStore, SegmentReduce, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Symmetric reduction over the set (row) dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Mean,
    Sum,
    Max,
    /// Mean of absolute values.
    AbsMean,
}

impl PoolKind {
    /// `n × d → 1 × d`.
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            PoolKind::Mean => tape.mean_rows(x),
            PoolKind::Sum => Ok(tape.sum_rows(x)),
            PoolKind::Max => tape.max_rows(x),
            PoolKind::AbsMean => {
                let a = tape.abs(x);
                tape.mean_rows(a)
            }
        }
    }

    /// Pools each row segment of a stacked batch: `n × d → B × d`.
    pub fn apply_segments(self, tape: &mut Tape, x: Var, bounds: &[usize]) -> Result<Var> {
        match self {
            PoolKind::Mean => tape.segment_reduce(x, bounds, SegmentReduce::Mean),
            PoolKind::Sum => tape.segment_reduce(x, bounds, SegmentReduce::Sum),
            PoolKind::Max => tape.segment_reduce(x, bounds, SegmentReduce::Max),
            PoolKind::AbsMean => {
                let a = tape.abs(x);
                tape.segment_reduce(a, bounds, SegmentReduce::Mean)
            }
        }
    }
}

/// Segment id of every row for the given bounds.
pub fn segment_ids(bounds: &[usize]) -> Vec<usize> {
    bounds
        .windows(2)
        .enumerate()
        .flat_map(|(s, w)| std::iter::repeat_n(s, w[1] - w[0]))
        .collect()
}

fn kaiming_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::as_matrix_shape(fan_in, fan_out, data)
}

fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::as_matrix_shape(rows, cols, data)
}

fn expect_cols(tape: &Tape, x: Var, d: usize, what: &str) -> Result<()> {
    let c = tape.value(x).cols();
    if c != d {
        return Err(Error::dim(format!("{what} expects {d} columns, got {c}")));
    }
    Ok(())
}

/// `y = act(x·W + b)`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weights = store.add(
            format!("{prefix}/weights"),
            kaiming_uniform(rng, d_in, d_out),
            ParamKind::Weight,
        )?;
        let bias = store.add(format!("{prefix}/bias"), Tensor::zeros(&[1, d_out]), ParamKind::Bias)?;
        Ok(Self {
            weights,
            bias,
            activation,
            d_in,
            d_out,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    /// The affine part only, before the activation.
    pub fn linear(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        expect_cols(tape, x, self.d_in, "dense layer")?;
        let xw = tape.matmul(x, p.var(self.weights))?;
        tape.add_row(xw, p.var(self.bias))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let z = self.linear(tape, p, x)?;
        Ok(self.activation.apply(tape, z))
    }
}

/// Permutation-equivariant layer `y = act(λ·x·W + γ·pool(x)·W + b)`, with the
/// pooled row broadcast back over the set.
#[derive(Clone, Debug)]
pub struct EquivariantLayer {
    pub lambda: ParamId,
    pub gamma: ParamId,
    pub weights: ParamId,
    pub bias: ParamId,
    pub pool: PoolKind,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl EquivariantLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        pool: PoolKind,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let lambda = store.add(format!("{prefix}/lambda"), Tensor::scalar(1.0), ParamKind::Scalar)?;
        let gamma = store.add(format!("{prefix}/gamma"), Tensor::scalar(0.0), ParamKind::Scalar)?;
        let weights = store.add(
            format!("{prefix}/weights"),
            kaiming_uniform(rng, d_in, d_out),
            ParamKind::Weight,
        )?;
        let bias = store.add(format!("{prefix}/bias"), Tensor::zeros(&[1, d_out]), ParamKind::Bias)?;
        Ok(Self {
            lambda,
            gamma,
            weights,
            bias,
            pool,
            activation,
            d_in,
            d_out,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out + 2
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        expect_cols(tape, x, self.d_in, "equivariant layer")?;
        let n = tape.value(x).rows();
        let w = p.var(self.weights);
        let xw = tape.matmul(x, w)?;
        let local = tape.mul_scalar(xw, p.var(self.lambda))?;
        let pooled = self.pool.apply(tape, x)?;
        let pw = tape.matmul(pooled, w)?;
        let pw = tape.mul_scalar(pw, p.var(self.gamma))?;
        let global = tape.broadcast_rows(pw, n)?;
        let z = tape.add(local, global)?;
        let z = tape.add_row(z, p.var(self.bias))?;
        Ok(self.activation.apply(tape, z))
    }

    /// Applies the layer to several sets stacked row-wise, pooling within
    /// each segment of `bounds`.
    pub fn forward_segments(&self, tape: &mut Tape, p: &Bound, x: Var, bounds: &[usize]) -> Result<Var> {
        expect_cols(tape, x, self.d_in, "equivariant layer")?;
        let w = p.var(self.weights);
        let xw = tape.matmul(x, w)?;
        let local = tape.mul_scalar(xw, p.var(self.lambda))?;
        let pooled = self.pool.apply_segments(tape, x, bounds)?;
        let pw = tape.matmul(pooled, w)?;
        let pw = tape.mul_scalar(pw, p.var(self.gamma))?;
        let global = tape.gather_rows(pw, &segment_ids(bounds))?;
        let z = tape.add(local, global)?;
        let z = tape.add_row(z, p.var(self.bias))?;
        Ok(self.activation.apply(tape, z))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = store.add(
            format!("{prefix}/gain"),
            Tensor::filled(&[1, dim], 1.0),
            ParamKind::Norm,
        )?;
        let shift = store.add(format!("{prefix}/shift"), Tensor::zeros(&[1, dim]), ParamKind::Norm)?;
        Ok(Self {
            gain,
            shift,
            dim,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.shift), self.eps)
    }
}

/// Stack of dense layers. Hidden layers use `hidden`, the last uses `last`.
/// With `normalize`, every layer that has an activation is normalized
/// before that activation is applied.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub norms: Vec<Option<LayerNorm>>,
}

impl Mlp {
    /// `dims` lists the input width followed by every layer's output width.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        normalize: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!("{prefix}: an MLP needs at least one layer")));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let act = if i + 2 == dims.len() { last } else { hidden };
            let name = format!("{prefix}/layer{i}");
            layers.push(DenseLayer::new(store, &name, w[0], w[1], act, rng)?);
            norms.push(if normalize && act != Activation::None {
                Some(LayerNorm::new(store, &format!("{name}/norm"), w[1])?)
            } else {
                None
            });
        }
        Ok(Self { layers, norms })
    }

    pub fn param_count(dims: &[usize], last: Activation, normalize: bool) -> usize {
        let n = dims.len().saturating_sub(1);
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act_on = i + 1 < n || last != Activation::None;
                DenseLayer::param_count(w[0], w[1]) + if normalize && act_on { 2 * w[1] } else { 0 }
            })
            .sum()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            x = match norm {
                Some(ln) => {
                    let z = layer.linear(tape, p, x)?;
                    let z = ln.forward(tape, p, z)?;
                    layer.activation.apply(tape, z)
                }
                None => layer.forward(tape, p, x)?,
            };
        }
        Ok(x)
    }
}

/// Unscaled dot-product attention `softmax(q·kᵀ)·v`, softmax taken per row.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        if !tape.value(x).is_finite() {
            return Err(Error::numeric(format!("non-finite {name} input to attention")));
        }
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim("attention keys and values must have equal row counts"));
    }
    let scores = tape.matmul_bt(q, k)?;
    let weights = tape.softmax_rows(scores);
    tape.matmul(weights, v)
}

/// Multi-head attention with per-head dimension `head_dim`. Projections map
/// `d_model → heads·head_dim`; the output projection maps back to `d_model`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub wq: DenseLayer,
    pub wk: DenseLayer,
    pub wv: DenseLayer,
    pub wo: DenseLayer,
}

impl MultiHeadAttention {
    /// Without an explicit `head_dim` the model width must split evenly
    /// across heads.
    pub fn resolve_head_dim(d_model: usize, heads: usize, head_dim: Option<usize>) -> Result<usize> {
        if heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        match head_dim {
            Some(0) => Err(Error::config("head_dim must be positive")),
            Some(hd) => Ok(hd),
            None if !d_model.is_multiple_of(heads) => Err(Error::config(format!(
                "model width {d_model} is not divisible by {heads} heads; set head_dim explicitly"
            ))),
            None => Ok(d_model / heads),
        }
    }

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        head_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hd = Self::resolve_head_dim(d_model, heads, head_dim)?;
        let inner = heads * hd;
        let mut proj = |name: &str, d_in: usize, d_out: usize| -> Result<DenseLayer> {
            let layer = DenseLayer::new(store, &format!("{prefix}/{name}"), d_in, d_out, Activation::None, rng)?;
            *store.get_mut(layer.weights) = normal(rng, d_in, d_out, 0.02);
            Ok(layer)
        };
        let wq = proj("wq", d_model, inner)?;
        let wk = proj("wk", d_model, inner)?;
        let wv = proj("wv", d_model, inner)?;
        let wo = proj("wo", inner, d_model)?;
        Ok(Self {
            heads,
            d_model,
            head_dim: hd,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn param_count(d_model: usize, heads: usize, head_dim: usize) -> usize {
        let inner = heads * head_dim;
        3 * DenseLayer::param_count(d_model, inner) + DenseLayer::param_count(inner, d_model)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.wq.forward(tape, p, q)?;
        let kp = self.wk.forward(tape, p, k)?;
        let vp = self.wv.forward(tape, p, v)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(qp, start, self.head_dim)?;
            let kh = tape.slice_cols(kp, start, self.head_dim)?;
            let vh = tape.slice_cols(vp, start, self.head_dim)?;
            outs.push(attention(tape, qh, kh, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.wo.forward(tape, p, cat)
    }
}

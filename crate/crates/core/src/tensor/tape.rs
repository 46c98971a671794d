use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    /// Row-segment sums, `bounds` holding `B + 1` offsets.
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    /// Source row of each `B × d` output entry.
    SegmentMax(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

/// Reduction applied within each row segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentReduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of tensor operations for reverse-mode
/// differentiation. Not shareable across threads; use one tape per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            return Err(Error::dim(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let mut out = vec![0.0; ar * bc];
        gemm(
            self.value(a).data(),
            ar,
            ac,
            false,
            self.value(b).data(),
            br,
            bc,
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::as_matrix_shape(ar, bc, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` where both operands share their column count.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != bc {
            return Err(Error::dim(format!("matmul_bt {ar}x{ac} by ({br}x{bc})ᵀ")));
        }
        let mut out = vec![0.0; ar * br];
        gemm(
            self.value(a).data(),
            ar,
            ac,
            false,
            self.value(b).data(),
            br,
            bc,
            true,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::as_matrix_shape(ar, br, out), Op::MatMulBt(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(format!(
                "{name}: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::as_matrix_shape(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds a `1 × d` row to every row of an `n × d` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != d {
            return Err(Error::dim(format!("add_row: {n}x{d} + {rr}x{rc}")));
        }
        let xr = self.value(x).data();
        let rv = self.value(row).data();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(xr[i * d..(i + 1) * d].iter().zip(rv).map(|(a, b)| a + b));
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::as_matrix_shape(n, d, data), Op::AddRow(x, row), rg))
    }

    /// Multiplies every entry of `x` by the `1 × 1` tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar expects a single-element scale"));
        }
        let k = self.value(s).data()[0];
        let v = self.value(x).map(|a| a * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a * k);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * d..(i + 1) * d];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(x);
        self.push(Tensor::as_matrix_shape(n, d, data), Op::SoftmaxRows(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance (biased, with
    /// `eps` added to the variance), then applies `gain` and `shift` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x);
        if d == 0 {
            return Err(Error::dim("layer_norm on zero-width rows"));
        }
        if self.dims(gain) != (1, d) || self.dims(shift) != (1, d) {
            return Err(Error::dim(format!("layer_norm gain/shift must be 1x{d}")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                data[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            Tensor::as_matrix_shape(n, d, data),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn column_reduce(&self, x: Var, init: f64, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (n, d) = self.dims(x);
        let src = self.value(x).data();
        let mut acc = vec![init; d];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *a = f(*a, v);
            }
        }
        acc
    }

    /// Column means: `n × d → 1 × d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if n == 0 {
            return Err(Error::dim("mean over an empty set"));
        }
        let data = self
            .column_reduce(x, 0.0, |a, v| a + v)
            .into_iter()
            .map(|s| s / n as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::as_matrix_shape(1, d, data), Op::MeanRows(x), rg))
    }

    /// Column sums: `n × d → 1 × d`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, d) = self.dims(x);
        let data = self.column_reduce(x, 0.0, |a, v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::as_matrix_shape(1, d, data), Op::SumRows(x), rg)
    }

    /// Column maxima: `n × d → 1 × d`; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if n == 0 {
            return Err(Error::dim("max over an empty set"));
        }
        let src = self.value(x).data();
        let mut arg = vec![0usize; d];
        let mut best = src[..d].to_vec();
        for i in 1..n {
            for j in 0..d {
                let v = src[i * d + j];
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::as_matrix_shape(1, d, best), Op::MaxRows(x, arg), rg))
    }

    /// Repeats a `1 × d` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let (r, d) = self.dims(row);
        if r != 1 {
            return Err(Error::dim("broadcast_rows expects a single row"));
        }
        let src = self.value(row).data();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let rg = self.rg(row);
        Ok(self.push(Tensor::as_matrix_shape(n, d, data), Op::BroadcastRows(row), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if start + len > d {
            return Err(Error::dim(format!("slice_cols {start}+{len} > {d}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::as_matrix_shape(n, len, data), Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of nothing"));
        };
        let n = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != n {
                return Err(Error::dim("concat_cols row mismatch"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::as_matrix_shape(n, total, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Reduces each row segment `bounds[b]..bounds[b + 1]` to one row:
    /// `n × d → B × d`. Segments must be non-empty.
    pub fn segment_reduce(&mut self, x: Var, bounds: &[usize], kind: SegmentReduce) -> Result<Var> {
        let (n, d) = self.dims(x);
        if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != n {
            return Err(Error::dim(format!("segment bounds must run from 0 to {n}")));
        }
        if bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::dim("segments must be non-empty and increasing"));
        }
        let b = bounds.len() - 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * d];
        let mut arg = Vec::new();
        match kind {
            SegmentReduce::Sum | SegmentReduce::Mean => {
                for s in 0..b {
                    let acc = &mut out[s * d..(s + 1) * d];
                    for r in bounds[s]..bounds[s + 1] {
                        for (a, v) in acc.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                            *a += v;
                        }
                    }
                    if kind == SegmentReduce::Mean {
                        let k = 1.0 / (bounds[s + 1] - bounds[s]) as f64;
                        acc.iter_mut().for_each(|a| *a *= k);
                    }
                }
            }
            SegmentReduce::Max => {
                arg = vec![0usize; b * d];
                for s in 0..b {
                    let first = bounds[s];
                    out[s * d..(s + 1) * d].copy_from_slice(&src[first * d..(first + 1) * d]);
                    arg[s * d..(s + 1) * d].iter_mut().for_each(|a| *a = first);
                    for r in first + 1..bounds[s + 1] {
                        for j in 0..d {
                            let v = src[r * d + j];
                            if v > out[s * d + j] {
                                out[s * d + j] = v;
                                arg[s * d + j] = r;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = match kind {
            SegmentReduce::Sum => Op::SegmentSum(x, bounds.to_vec()),
            SegmentReduce::Mean => Op::SegmentMean(x, bounds.to_vec()),
            SegmentReduce::Max => Op::SegmentMax(x, arg),
        };
        Ok(self.push(Tensor::as_matrix_shape(b, d, out), op, rg))
    }

    /// Output row `r` is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather index {bad} out of {n} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::as_matrix_shape(index.len(), d, data),
            Op::GatherRows(x, index.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of nothing"));
        };
        let d = self.dims(first).1;
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != d {
                return Err(Error::dim("concat_rows column mismatch"));
            }
            n += r;
        }
        let mut data = Vec::with_capacity(n * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::as_matrix_shape(n, d, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`, populating gradients of every
    /// node that requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if rg(*a) {
                        let mut d = vec![0.0; ta.len()];
                        gemm(
                            g.data(),
                            g.rows(),
                            g.cols(),
                            false,
                            tb.data(),
                            tb.rows(),
                            tb.cols(),
                            true,
                            &mut d,
                            false,
                        );
                        Self::accumulate(&mut grads, *a, Tensor::as_matrix_shape(ta.rows(), ta.cols(), d));
                    }
                    if rg(*b) {
                        let mut d = vec![0.0; tb.len()];
                        gemm(
                            ta.data(),
                            ta.rows(),
                            ta.cols(),
                            true,
                            g.data(),
                            g.rows(),
                            g.cols(),
                            false,
                            &mut d,
                            false,
                        );
                        Self::accumulate(&mut grads, *b, Tensor::as_matrix_shape(tb.rows(), tb.cols(), d));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if rg(*a) {
                        let mut d = vec![0.0; ta.len()];
                        gemm(
                            g.data(),
                            g.rows(),
                            g.cols(),
                            false,
                            tb.data(),
                            tb.rows(),
                            tb.cols(),
                            false,
                            &mut d,
                            false,
                        );
                        Self::accumulate(&mut grads, *a, Tensor::as_matrix_shape(ta.rows(), ta.cols(), d));
                    }
                    if rg(*b) {
                        let mut d = vec![0.0; tb.len()];
                        gemm(
                            g.data(),
                            g.rows(),
                            g.cols(),
                            true,
                            ta.data(),
                            ta.rows(),
                            ta.cols(),
                            false,
                            &mut d,
                            false,
                        );
                        Self::accumulate(&mut grads, *b, Tensor::as_matrix_shape(tb.rows(), tb.cols(), d));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        Self::accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        Self::accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if rg(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        Self::accumulate(&mut grads, *a, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                    }
                    if rg(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        Self::accumulate(&mut grads, *b, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                    }
                }
                Op::AddRow(x, row) => {
                    if rg(*x) {
                        Self::accumulate(&mut grads, *x, g.clone());
                    }
                    if rg(*row) {
                        let d = g.cols();
                        let mut acc = vec![0.0; d];
                        for r in 0..g.rows() {
                            for (a, v) in acc.iter_mut().zip(g.row_slice(r)) {
                                *a += v;
                            }
                        }
                        Self::accumulate(&mut grads, *row, Tensor::as_matrix_shape(1, d, acc));
                    }
                }
                Op::MulScalar(x, s) => {
                    let k = val(*s).data()[0];
                    if rg(*x) {
                        Self::accumulate(&mut grads, *x, g.map(|v| v * k));
                    }
                    if rg(*s) {
                        let dot: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                        let shape = val(*s).shape().to_vec();
                        Self::accumulate(&mut grads, *s, Tensor { shape, data: vec![dot] });
                    }
                }
                Op::Scale(x, k) => {
                    if rg(*x) {
                        Self::accumulate(&mut grads, *x, g.map(|v| v * k));
                    }
                }
                Op::Relu(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                }
                Op::Gelu(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                }
                Op::Sigmoid(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                }
                Op::Abs(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| gv * xv.signum() * f64::from(*xv != 0.0))
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(g.rows(), g.cols(), d));
                }
                Op::SoftmaxRows(x) => {
                    let (n, d) = (out.rows(), out.cols());
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let y = out.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = (out.rows(), out.cols());
                    let gv = val(*gain).data();
                    if rg(*gain) {
                        let mut dg = vec![0.0; d];
                        for r in 0..n {
                            for j in 0..d {
                                dg[j] += g.data()[r * d + j] * xhat[r * d + j];
                            }
                        }
                        Self::accumulate(&mut grads, *gain, Tensor::as_matrix_shape(1, d, dg));
                    }
                    if rg(*shift) {
                        let mut db = vec![0.0; d];
                        for r in 0..n {
                            for (a, v) in db.iter_mut().zip(g.row_slice(r)) {
                                *a += v;
                            }
                        }
                        Self::accumulate(&mut grads, *shift, Tensor::as_matrix_shape(1, d, db));
                    }
                    if rg(*x) {
                        let mut dx = vec![0.0; n * d];
                        let df = d as f64;
                        for r in 0..n {
                            let h = &xhat[r * d..(r + 1) * d];
                            let gr = g.row_slice(r);
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                s1 += dh;
                                s2 += dh * h[j];
                            }
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                dx[r * d + j] = inv_std[r] / df * (df * dh - s1 - h[j] * s2);
                            }
                        }
                        Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                    }
                }
                Op::MeanRows(x) | Op::SumRows(x) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let k = if matches!(node.op, Op::MeanRows(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let mut dx = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        dx.extend(g.data().iter().map(|v| v * k));
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::MaxRows(x, arg) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let mut dx = vec![0.0; n * d];
                    for (j, &i) in arg.iter().enumerate() {
                        dx[i * d + j] = g.data()[j];
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::BroadcastRows(row) => {
                    let d = g.cols();
                    let mut acc = vec![0.0; d];
                    for r in 0..g.rows() {
                        for (a, v) in acc.iter_mut().zip(g.row_slice(r)) {
                            *a += v;
                        }
                    }
                    Self::accumulate(&mut grads, *row, Tensor::as_matrix_shape(1, d, acc));
                }
                Op::SliceCols(x, start) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let len = g.cols();
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        dx[r * d + start..r * d + start + len].copy_from_slice(g.row_slice(r));
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (n, c) = (val(p).rows(), val(p).cols());
                        if rg(p) {
                            let mut dp = Vec::with_capacity(n * c);
                            for r in 0..n {
                                dp.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                            }
                            Self::accumulate(&mut grads, p, Tensor::as_matrix_shape(n, c, dp));
                        }
                        offset += c;
                    }
                }
                Op::SumAll(x) | Op::MeanAll(x) => {
                    let t = val(*x);
                    let k = if matches!(node.op, Op::MeanAll(_)) {
                        1.0 / t.len().max(1) as f64
                    } else {
                        1.0
                    };
                    let shape = t.shape().to_vec();
                    let data = vec![g.data()[0] * k; t.len()];
                    Self::accumulate(&mut grads, *x, Tensor { shape, data });
                }
                Op::SegmentSum(x, bounds) | Op::SegmentMean(x, bounds) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let mean = matches!(node.op, Op::SegmentMean(..));
                    let mut dx = vec![0.0; n * d];
                    for s in 0..bounds.len() - 1 {
                        let k = if mean {
                            1.0 / (bounds[s + 1] - bounds[s]) as f64
                        } else {
                            1.0
                        };
                        let gs = g.row_slice(s);
                        for r in bounds[s]..bounds[s + 1] {
                            for (a, v) in dx[r * d..(r + 1) * d].iter_mut().zip(gs) {
                                *a = v * k;
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::SegmentMax(x, arg) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let mut dx = vec![0.0; n * d];
                    for (k, &r) in arg.iter().enumerate() {
                        dx[r * d + k % d] += g.data()[k];
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::GatherRows(x, index) => {
                    let (n, d) = (val(*x).rows(), val(*x).cols());
                    let mut dx = vec![0.0; n * d];
                    for (r, &i) in index.iter().enumerate() {
                        for (a, v) in dx[i * d..(i + 1) * d].iter_mut().zip(g.row_slice(r)) {
                            *a += v;
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::as_matrix_shape(n, d, dx));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if rg(p) {
                            let dp = g.data()[offset..offset + len].to_vec();
                            Self::accumulate(&mut grads, p, Tensor::as_matrix_shape(val(p).rows(), val(p).cols(), dp));
                        }
                        offset += len;
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

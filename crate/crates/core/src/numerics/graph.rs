//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape once in reverse, accumulating into parents, so a leaf used
//! several times receives the sum of its contributions.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
struct GruCache {
    steps: usize,
    hidden: usize,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    ReverseRows(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    GatherPerRow { x: Var, idx: Vec<usize>, per_row: usize },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, index: usize },
    Reshape(Var),
    Im2Col { x: Var, kernel: usize, stride: usize, pad_left: usize },
    GruSeq { gx: Var, whh: Var, bhh: Var, cache: GruCache },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation.
///
/// Graphs are cheap to build and are meant to be thrown away after each
/// training step. Parameters are copied in on first use so a graph never
/// aliases a [`ParamStore`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter that took part in the computation.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- ops

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "row broadcast: {:?} against {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                if mul {
                    *x *= y
                } else {
                    *x += y
                }
            }
        }
        let rg = self.rg(a) || self.rg(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(t, op, rg))
    }

    /// Adds a vector to every slice along the last axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// Multiplies every slice along the last axis by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t inner dimensions differ: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = softmax_along(self.value(a), axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = softmax_along(self.value(a), axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance,
    /// then applies the optional per-position gain and bias.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = v.axis_split(axis)?;
        if n < 2 {
            return Err(Error::Shape(format!("layer_norm needs slices of length >= 2, got {n}")));
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != n {
                return Err(Error::Shape(format!(
                    "layer_norm affine {:?} does not match slice length {n}",
                    self.shape(p)
                )));
            }
        }
        let src = v.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..n {
                    xhat[at(j)] = (src[at(j)] - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        let g = gain.map(|g| self.value(g).data().to_vec());
        let b = bias.map(|b| self.value(b).data().to_vec());
        for (idx, y) in out.iter_mut().enumerate() {
            let j = (idx / inner) % n;
            if let Some(g) = &g {
                *y *= g[j];
            }
            if let Some(b) = &b {
                *y += b[j];
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, axis, xhat, inv_std }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = v.axis_split(axis)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let mut t = self.value(x).clone();
        for (y, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *y = value;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    /// Reverses the order of rows of a matrix.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for i in (0..r).rev() {
            data.extend_from_slice(v.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::ReverseRows(x), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows index out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[idx.len(), c], data)?, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// `out[r][j] = x[r][idx[r·per_row + j]]`
    pub fn gather_per_row(&mut self, x: Var, idx: &[usize], per_row: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if per_row == 0 || idx.len() != r * per_row || idx.iter().any(|&i| i >= c) {
            return Err(Error::Shape(format!(
                "gather_per_row: {} indices, {per_row} per row, for {r}x{c}",
                idx.len()
            )));
        }
        let data = idx.iter().enumerate().map(|(k, &j)| v.data()[(k / per_row) * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, per_row], data)?, Op::GatherPerRow { x, idx: idx.to_vec(), per_row }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Selects one element (flat row-major index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let val = *v.data().get(index).ok_or_else(|| Error::Shape(format!("pick {index} of {:?}", v.shape())))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(val), Op::Pick { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Unfolds `x[T×c]` into same-padded patches `[ceil(T/stride) × (kernel·c)]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let v = self.value(x);
        let (t_in, c) = v.dims2()?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Invalid("kernel and stride must be positive".into()));
        }
        let t_out = same_padded_len(t_in, stride);
        let pad_total = ((t_out - 1) * stride + kernel).saturating_sub(t_in);
        let pad_left = pad_total / 2;
        let width = kernel * c;
        let mut data = vec![0.0; t_out * width];
        for t in 0..t_out {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t_in {
                    data[t * width + j * c..t * width + (j + 1) * c].copy_from_slice(v.row(src as usize));
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[t_out, width], data)?, Op::Im2Col { x, kernel, stride, pad_left }, rg))
    }

    /// Runs the GRU recurrence from a zero state over precomputed input
    /// gates `gx[T×3h]` (order: reset, update, candidate). Returns all
    /// hidden states `[T×h]`.
    pub fn gru_seq(&mut self, gx: Var, whh: Var, bhh: Var) -> Result<Var> {
        let (steps, three_h) = self.value(gx).dims2()?;
        let (h, w3) = self.value(whh).dims2()?;
        if three_h != 3 * h || w3 != three_h || self.value(bhh).len() != three_h {
            return Err(Error::Shape(format!(
                "gru_seq: gates {:?}, recurrent weights {:?}, bias {:?}",
                self.shape(gx),
                self.shape(whh),
                self.shape(bhh)
            )));
        }
        let gxd = self.value(gx).data();
        let w = self.value(whh).data();
        let b = self.value(bhh).data();
        let mut hs = vec![0.0; steps * h];
        let mut r = vec![0.0; steps * h];
        let mut u = vec![0.0; steps * h];
        let mut n = vec![0.0; steps * h];
        let mut gh_n = vec![0.0; steps * h];
        let mut gh = vec![0.0; three_h];
        let mut prev = vec![0.0; h];
        for t in 0..steps {
            gh.copy_from_slice(b);
            gemm_nn(&prev, w, &mut gh, 1, h, three_h);
            let g = &gxd[t * three_h..(t + 1) * three_h];
            for j in 0..h {
                let rj = sigmoid(g[j] + gh[j]);
                let uj = sigmoid(g[h + j] + gh[h + j]);
                let nj = (g[2 * h + j] + rj * gh[2 * h + j]).tanh();
                let hj = (1.0 - uj) * nj + uj * prev[j];
                r[t * h + j] = rj;
                u[t * h + j] = uj;
                n[t * h + j] = nj;
                gh_n[t * h + j] = gh[2 * h + j];
                hs[t * h + j] = hj;
            }
            prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
        }
        let rg = self.rg(gx) || self.rg(whh) || self.rg(bhh);
        let cache = GruCache { steps, hidden: h, r, u, n, gh_n };
        Ok(self.push(Tensor::new(&[steps, h], hs)?, Op::GruSeq { gx, whh, bhh, cache }, rg))
    }

    /// `-log softmax(logits)[target]` for a vector of logits.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits);
        if target >= v.len() {
            return Err(Error::Invalid(format!("target {target} out of range for {} classes", v.len())));
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(v.data()[target] - max - z.ln());
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.len() {
            return Err(Error::Shape(format!("{} targets for {:?}", targets.len(), v.shape())));
        }
        let loss = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(grads, *a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(grads, *b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.value(*row).len();
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = self.value(*row).len();
                let r = self.value(*row).data();
                let va = self.value(*a).data();
                acc(grads, *a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        *x += g[k] * r[k % c];
                    }
                });
                acc(grads, *row, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        s[k % c] += gk * va[k];
                    }
                });
            }
            Op::Scale(a, f) => acc(grads, *a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(grads, *a, &mut |s| gemm_nt(g, vb, s, m, n, k));
                acc(grads, *b, &mut |s| gemm_tn(va, g, s, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).rows();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(grads, *a, &mut |s| gemm_nn(g, vb, s, m, n, k));
                acc(grads, *b, &mut |s| gemm_tn(g, va, s, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(grads, *a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(a) => acc(grads, *a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(grads, *a, &mut |s| {
                    for k in 0..s.len() {
                        if va[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = node.value.axis_split(*axis).unwrap();
                acc(grads, *x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = node.value.axis_split(*axis).unwrap();
                acc(grads, *x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += g[at(j)] - out[at(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, inv_std } => {
                let (outer, n, inner) = node.value.axis_split(*axis).unwrap();
                let gv = gain.map(|v| self.value(v).data());
                if let Some(b) = bias {
                    acc(grads, *b, &mut |s| {
                        for (k, &gk) in g.iter().enumerate() {
                            s[(k / inner) % n] += gk;
                        }
                    });
                }
                if let Some(gn) = gain {
                    acc(grads, *gn, &mut |s| {
                        for (k, &gk) in g.iter().enumerate() {
                            s[(k / inner) % n] += gk * xhat[k];
                        }
                    });
                }
                acc(grads, *x, &mut |s| {
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dxh = |j: usize| g[at(j)] * gv.map_or(1.0, |gv| gv[j]);
                            let sum_d: f64 = (0..n).map(dxh).sum();
                            let sum_dx: f64 = (0..n).map(|j| dxh(j) * xhat[at(j)]).sum();
                            let is = inv_std[o * inner + i];
                            for j in 0..n {
                                s[at(j)] += is / nf * (nf * dxh(j) - sum_d - xhat[at(j)] * sum_dx);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inner: usize = node.value.shape()[axis + 1..].iter().product();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    acc(grads, p, &mut |s| {
                        for o in 0..outer {
                            add_into(&mut s[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = self.value(*x).axis_split(*axis).unwrap();
                let len = node.value.shape()[*axis] * inner;
                acc(grads, *x, &mut |s| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_into(&mut s[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            Op::MaskedFill { x, mask } => acc(grads, *x, &mut |s| {
                for k in 0..s.len() {
                    if !mask[k] {
                        s[k] += g[k];
                    }
                }
            }),
            Op::ReverseRows(x) => {
                let (r, c) = node.value.dims2().unwrap();
                acc(grads, *x, &mut |s| {
                    for i in 0..r {
                        add_into(&mut s[(r - 1 - i) * c..(r - i) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                acc(grads, *x, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::GatherPerRow { x, idx, per_row } => {
                let c = self.value(*x).cols();
                acc(grads, *x, &mut |s| {
                    for (k, &j) in idx.iter().enumerate() {
                        s[(k / per_row) * c + j] += g[k];
                    }
                });
            }
            Op::Sum(x) => acc(grads, *x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(grads, *x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Pick { x, index } => acc(grads, *x, &mut |s| s[*index] += g[0]),
            Op::Reshape(x) => acc(grads, *x, &mut |s| add_into(s, g)),
            Op::Im2Col { x, kernel, stride, pad_left } => {
                let (t_in, c) = self.value(*x).dims2().unwrap();
                let (t_out, width) = node.value.dims2().unwrap();
                acc(grads, *x, &mut |s| {
                    for t in 0..t_out {
                        for j in 0..*kernel {
                            let src = (t * stride + j) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let src = src as usize;
                                add_into(&mut s[src * c..(src + 1) * c], &g[t * width + j * c..t * width + (j + 1) * c]);
                            }
                        }
                    }
                });
            }
            Op::GruSeq { gx, whh, bhh, cache } => {
                let grads_in = self.gru_backward(cache, *whh, g, out);
                if needs(*gx) {
                    acc(grads, *gx, &mut |s| add_into(s, &grads_in.0));
                }
                acc(grads, *whh, &mut |s| add_into(s, &grads_in.1));
                acc(grads, *bhh, &mut |s| add_into(s, &grads_in.2));
            }
            Op::CrossEntropy { logits, target, probs } => acc(grads, *logits, &mut |s| {
                for k in 0..s.len() {
                    let y = if k == *target { 1.0 } else { 0.0 };
                    s[k] += g[0] * (probs[k] - y);
                }
            }),
            Op::BceLogits { logits, targets } => {
                let v = self.value(*logits).data();
                acc(grads, *logits, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(v[k]) - targets[k]);
                    }
                })
            }
        }
    }

    /// Backprop through time. Returns `(d gx, d whh, d bhh)`.
    fn gru_backward(&self, c: &GruCache, whh: Var, g: &[f64], hs: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = c.hidden;
        let three_h = 3 * h;
        let w = self.value(whh).data();
        let mut d_gx = vec![0.0; c.steps * three_h];
        let mut d_w = vec![0.0; h * three_h];
        let mut d_b = vec![0.0; three_h];
        let mut dh_next = vec![0.0; h];
        let mut dgh = vec![0.0; three_h];
        let mut dh_prev = vec![0.0; h];
        let zero = vec![0.0; h];
        for t in (0..c.steps).rev() {
            let prev = if t == 0 { &zero[..] } else { &hs[(t - 1) * h..t * h] };
            for j in 0..h {
                let k = t * h + j;
                let dh = g[k] + dh_next[j];
                let (r, u, n) = (c.r[k], c.u[k], c.n[k]);
                let dn = dh * (1.0 - u);
                let du = dh * (prev[j] - n);
                dh_prev[j] = dh * u;
                let dan = dn * (1.0 - n * n);
                let dr = dan * c.gh_n[k];
                let dar = dr * r * (1.0 - r);
                let dau = du * u * (1.0 - u);
                d_gx[t * three_h + j] = dar;
                d_gx[t * three_h + h + j] = dau;
                d_gx[t * three_h + 2 * h + j] = dan;
                dgh[j] = dar;
                dgh[h + j] = dau;
                dgh[2 * h + j] = dan * r;
            }
            add_into(&mut d_b, &dgh);
            gemm_tn(prev, &dgh, &mut d_w, 1, h, three_h);
            gemm_nt(&dgh, w, &mut dh_prev, 1, three_h, h);
            dh_next.copy_from_slice(&dh_prev);
        }
        (d_gx, d_w, d_b)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output length of a same-padded strided convolution.
pub fn same_padded_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, n, inner) = t.axis_split(axis)?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (src[at(j)] - max).exp()).sum();
            let lz = z.ln();
            for j in 0..n {
                out[at(j)] = if log { src[at(j)] - max - lz } else { (src[at(j)] - max).exp() / z };
            }
        }
    }
    Tensor::new(t.shape(), out)
}

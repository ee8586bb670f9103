//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one loss evaluation in execution
//! order; [`Graph::backward`] walks the tape in reverse and accumulates
//! adjoints. Layer-sized primitives (layer norm, multi-head attention,
//! depthwise convolution, softmax cross-entropy) carry hand-written adjoints
//! instead of being decomposed into scalar ops.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::tensor::softmax_rows;
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    DwConv { x: Var, w: Var, batch: usize, len: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentMean { x: Var, seg_len: usize },
    RowSum(Var),
    RowDot(Var, Var),
    RowNorm(Var),
    BroadcastCols(Var),
    WeightedRowSum { x: Var, weights: Vec<T> },
    Sum(Var),
    Linearized { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of an arbitrary node, `None` if it does not influence the loss
    /// through a differentiable path.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a trainable parameter bound by name.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.var(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Parameter adjoints keyed by name; parameters without a gradient path
    /// receive explicit zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            let g = self.nodes[v.0].take().unwrap_or_else(|| {
                let t = store.get(&name).expect("bound parameter exists");
                Tensor::raw(t.shape().to_vec(), vec![T::zero(); t.len()])
            });
            out.insert(name, g);
        }
        out
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = k * (T::one() + T::c(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), frozen: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no adjoint.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose adjoint is retained (e.g. a latent being optimised).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter. Trainable bindings are reported by
    /// [`Gradients::param`]; frozen bindings behave as constants. Repeated
    /// binding of a name returns the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.frozen.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.insert(name.to_string(), v);
        } else {
            self.frozen.insert(name.to_string(), v);
        }
        Ok(v)
    }

    fn shape_err(msg: String) -> Error {
        Error::Shape(msg)
    }

    fn same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a length-`c` bias to every row of a `[r×c]` value.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Self::shape_err(format!("bias of {} for {c} columns", bv.len())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "mul")?;
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "div")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| gelu_parts(v).0);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        let ng = self.ng(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Self::shape_err("layer_norm affine size".into()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let cf = T::c(c as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Multi-head scaled dot-product attention. `q` is `[batch·q_len × width]`,
    /// `k` and `v` are `[batch·kv_len × width]`; heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let w = qv.cols();
        let AttnDims { batch, q_len, kv_len, heads } = dims;
        if w % heads != 0
            || kv.cols() != w
            || vv.cols() != w
            || qv.rows() != batch * q_len
            || kv.rows() != batch * kv_len
            || vv.rows() != batch * kv_len
        {
            return Err(Self::shape_err(format!(
                "attention q{:?} k{:?} v{:?} with {dims:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let hd = w / heads;
        let scale = T::one() / T::c(hd as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut out = vec![T::zero(); batch * q_len * w];
        let mut srow = vec![T::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * w + off..][..hd];
                    let mut mx = T::neg_infinity();
                    for (j, s) in srow.iter_mut().enumerate() {
                        let krow = &kd[(b * kv_len + j) * w + off..][..hd];
                        let dot: T = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum();
                        *s = dot * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = T::zero();
                    for s in srow.iter_mut() {
                        *s = (*s - mx).exp();
                        z = z + *s;
                    }
                    let pbase = ((b * heads + h) * q_len + i) * kv_len;
                    let orow = &mut out[(b * q_len + i) * w + off..][..hd];
                    for (j, &s) in srow.iter().enumerate() {
                        let p = s / z;
                        probs[pbase + j] = p;
                        let vrow = &vd[(b * kv_len + j) * w + off..][..hd];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::mat(batch * q_len, w, out);
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, ng))
    }

    /// Depthwise 1-D convolution along the sequence axis with zero padding.
    /// `x` is `[batch·len × c]`, `w` is `[kernel × c]` with odd kernel.
    pub fn dwconv(&mut self, x: Var, w: Var, batch: usize, len: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let c = xv.cols();
        let kernel = wv.rows();
        if wv.cols() != c || kernel % 2 == 0 || xv.rows() != batch * len {
            return Err(Self::shape_err(format!("dwconv x{:?} w{:?}", xv.shape(), wv.shape())));
        }
        let half = kernel / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..len {
                let orow = &mut out[(b * len + t) * c..][..c];
                for j in 0..kernel {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &xd[(b * len + src as usize) * c..][..c];
                    let wrow = &wd[j * c..][..c];
                    for ((o, &xx), &ww) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o = *o + xx * ww;
                    }
                }
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::DwConv { x, w, batch, len }, ng))
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Self::shape_err(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Self::shape_err(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let probs = softmax_rows(lv);
        let mut total = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let row = lv.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total = total + weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs: probs.into_data(),
            },
            ng,
        ))
    }

    /// Output row `r` is input row `idx[r]` (embedding lookup, slicing,
    /// reordering, repetition).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Self::shape_err("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Self::shape_err(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::mat(idx.len(), c, out), Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Self::shape_err("empty concat".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Self::shape_err("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::mat(rows, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean over consecutive groups of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Self::shape_err(format!("segment_mean {rows} rows by {seg_len}")));
        }
        let segs = rows / seg_len;
        let inv = T::one() / T::c(seg_len as f64);
        let mut out = vec![T::zero(); segs * c];
        for r in 0..rows {
            let orow = &mut out[(r / seg_len) * c..][..c];
            for (o, &v) in orow.iter_mut().zip(xv.row(r)) {
                *o = *o + v * inv;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::mat(segs, c, out), Op::SegmentMean { x, seg_len }, ng))
    }

    /// `[r×c] → [r×1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        let ng = self.ng(&[x]);
        let n = out.len();
        self.push(Tensor::mat(n, 1, out), Op::RowSum(x), ng)
    }

    /// Rowwise inner products, `[r×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "row_dot")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let ng = self.ng(&[a, b]);
        let n = out.len();
        Ok(self.push(Tensor::mat(n, 1, out), Op::RowDot(a, b), ng))
    }

    /// Rowwise Euclidean norms, `[r×1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let ng = self.ng(&[x]);
        let n = out.len();
        self.push(Tensor::mat(n, 1, out), Op::RowNorm(x), ng)
    }

    /// Repeats an `[r×1]` column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Self::shape_err("broadcast_cols expects one column".into()));
        }
        let mut out = Vec::with_capacity(xv.rows() * cols);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        let ng = self.ng(&[x]);
        let r = xv.rows();
        Ok(self.push(Tensor::mat(r, cols, out), Op::BroadcastCols(x), ng))
    }

    /// `Σ_r weights[r] · Σ_c x[r,c]`.
    pub fn weighted_row_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.rows() {
            return Err(Self::shape_err(format!(
                "weighted_row_sum: {} weights for {} rows",
                weights.len(),
                xv.rows()
            )));
        }
        let total: T = (0..xv.rows())
            .map(|r| weights[r] * xv.row(r).iter().copied().sum::<T>())
            .sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::WeightedRowSum { x, weights: weights.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// outside the tape (iterative solvers, sorting-based costs).
    pub fn linearized(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Self::shape_err("linearized gradient shape".into()));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::Linearized { x, grad }, ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Self::shape_err("backward from a non-scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let nodes = &self.nodes;
        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { nodes: grads, params: self.params })
    }
}

fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::raw(t.shape().to_vec(), vec![T::zero(); t.len()])
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].needs_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if wants(*a) {
                // dA = G · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                acc(nodes, grads, *a, Tensor::raw(av.shape().to_vec(), da));
            }
            if wants(*b) {
                // dB = Aᵀ · G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                acc(nodes, grads, *b, Tensor::raw(bv.shape().to_vec(), db));
            }
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, *x, g.clone());
            if wants(*b) {
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(nodes, grads, *b, Tensor::raw(val(*b).shape().to_vec(), db));
            }
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            if wants(*b) {
                acc(nodes, grads, *b, g.scale(-T::one()));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                acc(nodes, grads, *a, g.mul(val(*b)).expect("same shape"));
            }
            if wants(*b) {
                acc(nodes, grads, *b, g.mul(val(*a)).expect("same shape"));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if wants(*a) {
                acc(nodes, grads, *a, g.zip_map(bv, |gg, y| gg / y).expect("same shape"));
            }
            if wants(*b) {
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(bv.data())
                    .map(|((&gg, &q), &y)| -gg * q / y)
                    .collect();
                acc(nodes, grads, *b, Tensor::raw(bv.shape().to_vec(), d));
            }
        }
        Op::Scale(a, s) => acc(nodes, grads, *a, g.scale(*s)),
        Op::Tanh(a) => {
            acc(nodes, grads, *a, g.zip_map(out, |gg, y| gg * (T::one() - y * y)).expect("same shape"))
        }
        Op::Exp(a) => acc(nodes, grads, *a, g.mul(out).expect("same shape")),
        Op::Gelu(a) => {
            acc(nodes, grads, *a, g.zip_map(val(*a), |gg, x| gg * gelu_parts(x).1).expect("same shape"))
        }
        Op::Clamp(a, lo, hi) => {
            let d = g
                .zip_map(val(*a), |gg, x| if x > *lo && x < *hi { gg } else { T::zero() })
                .expect("same shape");
            acc(nodes, grads, *a, d);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = g.cols();
            let rows = g.rows();
            let gam = val(*gamma).data();
            if wants(*gamma) || wants(*beta) {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let gg = g.data()[r * c + j];
                        dg[j] = dg[j] + gg * xhat[r * c + j];
                        db[j] = db[j] + gg;
                    }
                }
                acc(nodes, grads, *gamma, Tensor::raw(val(*gamma).shape().to_vec(), dg));
                acc(nodes, grads, *beta, Tensor::raw(val(*beta).shape().to_vec(), db));
            }
            if wants(*x) {
                let cf = T::c(c as f64);
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let dh = g.data()[r * c + j] * gam[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dh = g.data()[r * c + j] * gam[j];
                        dx[r * c + j] = rstd[r] * (dh - s1 / cf - xhat[r * c + j] * s2 / cf);
                    }
                }
                acc(nodes, grads, *x, Tensor::raw(val(*x).shape().to_vec(), dx));
            }
        }
        Op::Attention { q, k, v, dims, probs } => {
            let AttnDims { batch, q_len, kv_len, heads } = *dims;
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let w = qv.cols();
            let hd = w / heads;
            let scale = T::one() / T::c(hd as f64).sqrt();
            let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            let mut dp = vec![T::zero(); kv_len];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * hd;
                    for i in 0..q_len {
                        let pbase = ((b * heads + h) * q_len + i) * kv_len;
                        let p = &probs[pbase..pbase + kv_len];
                        let grow = &gd[(b * q_len + i) * w + off..][..hd];
                        let mut dot = T::zero();
                        for j in 0..kv_len {
                            let vrow = &vd[(b * kv_len + j) * w + off..][..hd];
                            let d: T = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                            dp[j] = d;
                            dot = dot + d * p[j];
                            let dvrow = &mut dv[(b * kv_len + j) * w + off..][..hd];
                            for (o, &gg) in dvrow.iter_mut().zip(grow) {
                                *o = *o + p[j] * gg;
                            }
                        }
                        let qrow_off = (b * q_len + i) * w + off;
                        for j in 0..kv_len {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let koff = (b * kv_len + j) * w + off;
                            for t in 0..hd {
                                dq[qrow_off + t] = dq[qrow_off + t] + ds * kd[koff + t];
                                dk[koff + t] = dk[koff + t] + ds * qd[qrow_off + t];
                            }
                        }
                    }
                }
            }
            acc(nodes, grads, *q, Tensor::raw(qv.shape().to_vec(), dq));
            acc(nodes, grads, *k, Tensor::raw(kv.shape().to_vec(), dk));
            acc(nodes, grads, *v, Tensor::raw(vv.shape().to_vec(), dv));
        }
        Op::DwConv { x, w, batch, len } => {
            let (xv, wv) = (val(*x), val(*w));
            let c = xv.cols();
            let kernel = wv.rows();
            let half = kernel / 2;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            for b in 0..*batch {
                for t in 0..*len {
                    let grow = &g.data()[(b * len + t) * c..][..c];
                    for j in 0..kernel {
                        let src = t as isize + j as isize - half as isize;
                        if src < 0 || src >= *len as isize {
                            continue;
                        }
                        let base = (b * len + src as usize) * c;
                        for ch in 0..c {
                            dx[base + ch] = dx[base + ch] + grow[ch] * wv.data()[j * c + ch];
                            dw[j * c + ch] = dw[j * c + ch] + grow[ch] * xv.data()[base + ch];
                        }
                    }
                }
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
            acc(nodes, grads, *w, Tensor::raw(wv.shape().to_vec(), dw));
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let lv = val(*logits);
            let vocab = lv.cols();
            let up = g.item();
            let mut d = vec![T::zero(); lv.len()];
            for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                if wt == T::zero() {
                    continue;
                }
                let s = up * wt;
                for j in 0..vocab {
                    d[r * vocab + j] = s * probs[r * vocab + j];
                }
                d[r * vocab + t] = d[r * vocab + t] - s;
            }
            acc(nodes, grads, *logits, Tensor::raw(lv.shape().to_vec(), d));
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] = dx[i * c + j] + g.data()[r * c + j];
                }
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if wants(p) {
                    let piece = g.data()[offset..offset + n].to_vec();
                    acc(nodes, grads, p, Tensor::raw(val(p).shape().to_vec(), piece));
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut col = 0;
            for &p in parts {
                let c = val(p).cols();
                if wants(p) {
                    let mut piece = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        piece.extend_from_slice(&g.data()[r * total + col..][..c]);
                    }
                    acc(nodes, grads, p, Tensor::raw(val(p).shape().to_vec(), piece));
                }
                col += c;
            }
        }
        Op::SegmentMean { x, seg_len } => {
            let xv = val(*x);
            let c = xv.cols();
            let inv = T::one() / T::c(*seg_len as f64);
            let mut dx = vec![T::zero(); xv.len()];
            for r in 0..xv.rows() {
                let grow = &g.data()[(r / seg_len) * c..][..c];
                for j in 0..c {
                    dx[r * c + j] = grow[j] * inv;
                }
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
        }
        Op::RowSum(x) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = Vec::with_capacity(xv.len());
            for &gg in g.data() {
                dx.extend(std::iter::repeat_n(gg, c));
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
        }
        Op::RowDot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let c = av.cols();
            let expand = |other: &Tensor<T>| {
                let mut d = Vec::with_capacity(other.len());
                for (r, &gg) in g.data().iter().enumerate() {
                    d.extend(other.row(r).iter().map(|&v| gg * v));
                }
                debug_assert_eq!(d.len(), g.len() * c);
                Tensor::raw(other.shape().to_vec(), d)
            };
            if wants(*a) {
                acc(nodes, grads, *a, expand(bv));
            }
            if wants(*b) {
                acc(nodes, grads, *b, expand(av));
            }
        }
        Op::RowNorm(x) => {
            let xv = val(*x);
            let mut dx = Vec::with_capacity(xv.len());
            for (r, &gg) in g.data().iter().enumerate() {
                let n = out.data()[r];
                let s = if n > T::zero() { gg / n } else { T::zero() };
                dx.extend(xv.row(r).iter().map(|&v| s * v));
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
        }
        Op::BroadcastCols(x) => {
            let c = g.cols();
            let d: Vec<T> = g.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
            acc(nodes, grads, *x, Tensor::raw(val(*x).shape().to_vec(), d));
        }
        Op::WeightedRowSum { x, weights } => {
            let xv = val(*x);
            let c = xv.cols();
            let up = g.item();
            let mut dx = Vec::with_capacity(xv.len());
            for &w in weights {
                dx.extend(std::iter::repeat_n(up * w, c));
            }
            acc(nodes, grads, *x, Tensor::raw(xv.shape().to_vec(), dx));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            let mut d = zeros_like(xv);
            let up = g.item();
            d.data_mut().iter_mut().for_each(|v| *v = up);
            acc(nodes, grads, *x, d);
        }
        Op::Linearized { x, grad } => acc(nodes, grads, *x, grad.scale(g.item())),
    }
}

//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node once. Parameters are borrowed from the model rather than
//! copied; gradients come back keyed by parameter name.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::kernels::{self, MatView};
use super::tensor::{shape_mismatch, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Masking layout for fused multi-head attention over flattened batches.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`.
/// Key positions at or beyond `key_lens[b]` are masked; `causal` additionally
/// hides keys to the right of each query.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op {
    Constant,
    Param(String),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    MulMask {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter registered on the
/// graph, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(name.to_string()),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b`, or `a · bᵀ` with `trans_b`. `a` may have any rank; its last
    /// axis is contracted and the leading axes are kept.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        let m = av.rows();
        let (bk, n) = bv.as_matrix("matmul rhs")?;
        let (bk, n) = if trans_b { (n, bk) } else { (bk, n) };
        if k != bk || av.rank() == 0 {
            return Err(shape_mismatch("matmul", av.shape(), bv.shape()));
        }
        let out = kernels::gemm_new(m, k, n, av.data(), false, bv.data(), trans_b);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_mismatch("add", av.shape(), bv.shape()));
        }
        let mut t = av.clone();
        t.add_assign(bv)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_mismatch("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut t = xv.clone();
        kernels::add_row_bias(t.data_mut(), bv.data());
        Ok(self.push(t, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Shape(format!(
                "mask of {} values for tensor {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let mut t = xv.clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(t, Op::MulMask { x, mask }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows()];
        kernels::layer_norm_rows(
            xv.data(),
            cols,
            gv.data(),
            bv.data(),
            eps,
            &mut out,
            Some(&mut xhat),
            Some(&mut inv_std),
        );
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::Shape("softmax over an empty last axis".into()));
        }
        let mut t = xv.clone();
        let cols = t.cols();
        for row in t.data_mut().chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(t, Op::SoftmaxRows { x }, &[x]))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.as_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!("id {id} outside table of {rows} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Fused scaled dot-product attention with `spec.heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || d % spec.heads.max(1) != 0 || spec.heads == 0 {
            return Err(shape_mismatch("attention", qv.shape(), kv.shape()));
        }
        if qv.rows() != spec.batch * spec.q_len
            || kv.rows() != spec.batch * spec.k_len
            || vv.rows() != kv.rows()
            || spec.key_lens.len() != spec.batch
        {
            return Err(Error::Shape(format!(
                "attention layout {}x{}/{} does not match q {:?} k {:?}",
                spec.batch,
                spec.q_len,
                spec.k_len,
                qv.shape(),
                kv.shape()
            )));
        }
        if spec.key_lens.iter().any(|&l| l == 0 || l > spec.k_len) {
            return Err(Error::Shape("attention key length outside [1, k_len]".into()));
        }
        let mut out = vec![0.0; qv.len()];
        let probs = attention_forward(qv.data(), kv.data(), vv.data(), d, &spec, &mut out);
        let t = Tensor::new(qv.shape(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, spec, probs }, &[q, k, v]))
    }

    /// Label-smoothed cross entropy averaged over rows whose `mask` is true.
    ///
    /// The smoothed target puts `1 - smoothing` on the gold id and spreads
    /// `smoothing` uniformly over the other `V - 1` ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool], smoothing: f64) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        let rows = lv.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross entropy over {rows} rows given {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) || (vocab < 2 && smoothing > 0.0) {
            return Err(Error::Range(format!("label smoothing {smoothing} for V={vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let on = 1.0 - smoothing;
        let mut probs = vec![0.0; lv.len()];
        let mut weights = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Range(format!("target id {t} outside vocabulary of {vocab}")));
            }
            let lp = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::log_softmax(lv.row(r), lp);
            let sum_lp: f64 = lp.iter().sum();
            let loss = -(on * lp[t] + off * (sum_lp - lp[t]));
            total += loss;
            for p in lp.iter_mut() {
                *p = p.exp();
            }
            weights[r] = 1.0 / count as f64;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Param(_) | Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((
                    name.clone(),
                    grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Adds `factor · src` to the gradient of `v`; the first contribution is
    /// stored directly instead of being added to a zero buffer.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, src: &[f64], factor: f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => axpy(t.data_mut(), src, factor),
            empty => {
                let data = if factor == 1.0 {
                    src.to_vec()
                } else {
                    src.iter().map(|x| factor * x).collect()
                };
                *empty = Some(self.fresh(v, data));
            }
        }
    }

    /// Like `accumulate` with an owned, already-final contribution.
    fn accumulate_owned(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => axpy(t.data_mut(), &data, 1.0),
            empty => *empty = Some(self.fresh(v, data)),
        }
    }

    fn fresh(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.nodes[v.0].value.shape(), data).expect("gradient has the value's shape")
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.cols();
                let m = av.rows();
                let n = g.cols();
                // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                match &mut grads[a.0] {
                    _ if !self.nodes[a.0].needs_grad => {}
                    Some(ga) => kernels::gemm(m, n, k, gd, false, bv.data(), !*trans_b, ga.data_mut(), true),
                    empty => {
                        let d = kernels::gemm_new(m, n, k, gd, false, bv.data(), !*trans_b);
                        *empty = Some(self.fresh(*a, d));
                    }
                }
                // B is [n, k] when transposed: dB = dCᵀ · A; otherwise dB = Aᵀ · dC
                let (rows, inner, cols, lhs, rhs) = if *trans_b {
                    (n, m, k, gd, av.data())
                } else {
                    (k, m, n, av.data(), gd)
                };
                match &mut grads[b.0] {
                    _ if !self.nodes[b.0].needs_grad => {}
                    Some(gb) => kernels::gemm(rows, inner, cols, lhs, true, rhs, false, gb.data_mut(), true),
                    empty => {
                        let d = kernels::gemm_new(rows, inner, cols, lhs, true, rhs, false);
                        *empty = Some(self.fresh(*b, d));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(grads, *v, gd, 1.0);
                }
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, gd, 1.0);
                if let Some(s) = self.slot(grads, *bias) {
                    let cols = s.len();
                    let sd = s.data_mut();
                    for row in gd.chunks_exact(cols) {
                        axpy(sd, row, 1.0);
                    }
                }
            }
            Op::Scale { x, factor } => self.accumulate(grads, *x, gd, *factor),
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                match &mut grads[x.0] {
                    _ if !self.nodes[x.0].needs_grad => {}
                    Some(s) => {
                        for ((o, &gi), &xi) in s.data_mut().iter_mut().zip(gd).zip(xv) {
                            if xi > 0.0 {
                                *o += gi;
                            }
                        }
                    }
                    empty => {
                        let d = gd
                            .iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect();
                        *empty = Some(self.fresh(*x, d));
                    }
                }
            }
            Op::MulMask { x, mask } => match &mut grads[x.0] {
                _ if !self.nodes[x.0].needs_grad => {}
                Some(s) => {
                    for ((o, &gi), &m) in s.data_mut().iter_mut().zip(gd).zip(mask) {
                        *o += gi * m;
                    }
                }
                empty => {
                    let d = gd.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                    *empty = Some(self.fresh(*x, d));
                }
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = self.value(*gain).data();
                let cols = gain_v.len();
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    let mut dxhat = vec![0.0; cols];
                    for (r, gr) in gd.chunks_exact(cols).enumerate() {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gain_v[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let c = inv_std[r] / cols as f64;
                        let out = &mut sd[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += c * (cols as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    let sd = s.data_mut();
                    for (gr, xh) in gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            sd[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let sd = s.data_mut();
                    for gr in gd.chunks_exact(cols) {
                        axpy(sd, gr, 1.0);
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let p = node.value.data();
                let cols = node.value.cols();
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for (r, (gr, pr)) in gd.chunks_exact(cols).zip(p.chunks_exact(cols)).enumerate() {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            sd[r * cols + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(s) = self.slot(grads, *table) {
                    let cols = s.cols();
                    let sd = s.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut sd[id * cols..(id + 1) * cols], &gd[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let d = node.value.cols();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = self.nodes[q.0].needs_grad.then(|| vec![0.0; qv.len()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![0.0; kv.len()]);
                let mut dv = self.nodes[v.0].needs_grad.then(|| vec![0.0; vv.len()]);
                attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    d,
                    spec,
                    probs,
                    gd,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(b) = buf {
                        self.accumulate_owned(grads, *var, b);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let upstream = gd[0];
                if let Some(s) = self.slot(grads, *logits) {
                    let vocab = s.cols();
                    let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
                    let on = 1.0 - smoothing;
                    let sd = s.data_mut();
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = w * upstream;
                        let row = &mut sd[r * vocab..(r + 1) * vocab];
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let q = if j == targets[r] { on } else { off };
                            row[j] += scale * (pr[j] - q);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let up = gd[0];
                if let Some(s) = self.slot(grads, *x) {
                    for o in s.data_mut() {
                        *o += up;
                    }
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, gd, 1.0),
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn head_view(base_row: usize, d: usize, head_offset: usize) -> MatView {
    MatView::dense(d).at(base_row * d + head_offset)
}

fn head_view_t(base_row: usize, d: usize, head_offset: usize) -> MatView {
    MatView {
        offset: base_row * d + head_offset,
        row_stride: 1,
        col_stride: d as isize,
    }
}

/// Forward attention; returns the probability tensor laid out as
/// `[batch, heads, q_len, k_len]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    spec: &AttentionSpec,
    out: &mut [f64],
) -> Vec<f64> {
    let AttentionSpec {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let block = q_len * k_len;
    let mut probs = vec![0.0; batch * heads * block];
    for b in 0..batch {
        let klen = spec.key_lens[b];
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * block..(b * heads + h + 1) * block];
            kernels::gemm_view(
                q_len,
                dh,
                k_len,
                scale,
                q,
                head_view(b * q_len, d, h * dh),
                k,
                head_view_t(b * k_len, d, h * dh),
                0.0,
                p,
                MatView::dense(k_len),
            );
            for i in 0..q_len {
                let row = &mut p[i * k_len..(i + 1) * k_len];
                let visible = if spec.causal { klen.min(i + 1) } else { klen };
                for x in &mut row[visible..] {
                    *x = f64::NEG_INFINITY;
                }
                kernels::softmax_in_place(row);
            }
            kernels::gemm_view(
                q_len,
                k_len,
                dh,
                1.0,
                p,
                MatView::dense(k_len),
                v,
                head_view(b * k_len, d, h * dh),
                0.0,
                out,
                head_view(b * q_len, d, h * dh),
            );
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    spec: &AttentionSpec,
    probs: &[f64],
    dout: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let AttentionSpec {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let block = q_len * k_len;
    let mut ds = vec![0.0; block];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
            let qview = head_view(b * q_len, d, h * dh);
            let kview = head_view(b * k_len, d, h * dh);
            if let Some(dv) = dv.as_deref_mut() {
                // dV = Pᵀ · dO
                kernels::gemm_view(
                    k_len,
                    q_len,
                    dh,
                    1.0,
                    p,
                    MatView::transposed(k_len),
                    dout,
                    qview,
                    1.0,
                    dv,
                    kview,
                );
            }
            // dP = dO · Vᵀ
            kernels::gemm_view(
                q_len,
                dh,
                k_len,
                1.0,
                dout,
                qview,
                v,
                head_view_t(b * k_len, d, h * dh),
                0.0,
                &mut ds,
                MatView::dense(k_len),
            );
            for i in 0..q_len {
                let pr = &p[i * k_len..(i + 1) * k_len];
                let dr = &mut ds[i * k_len..(i + 1) * k_len];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..k_len {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                kernels::gemm_view(
                    q_len,
                    k_len,
                    dh,
                    scale,
                    &ds,
                    MatView::dense(k_len),
                    k,
                    kview,
                    1.0,
                    dq,
                    qview,
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                kernels::gemm_view(
                    k_len,
                    q_len,
                    dh,
                    scale,
                    &ds,
                    MatView::transposed(k_len),
                    q,
                    qview,
                    1.0,
                    dk,
                    kview,
                );
            }
        }
    }
}

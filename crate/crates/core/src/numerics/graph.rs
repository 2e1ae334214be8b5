//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops are appended to a [`Graph`] in evaluation order, which is a valid
//! topological order. [`Graph::backward`] walks the tape once in reverse.
//! Parameters can be borrowed into the graph so a training step never copies
//! the model.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{dot, matmul_acc, transpose};
use super::mask::VisibleRows;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, F> {
    Borrowed(&'a Tensor<F>),
    Owned(Tensor<F>),
}

impl<F> Value<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Gelu(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rows: Rc<VisibleRows>,
        n_heads: usize,
        probs: Vec<F>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Vec<(usize, F)>>,
        probs: Vec<F>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    Mse {
        x: Var,
        target: Vec<F>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

struct Node<'a, F> {
    value: Value<'a, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<'a, F> {
    nodes: Vec<Node<'a, F>>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, t: Tensor<F>, op: Op<F>, name: &'static str, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.leaf(Value::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor<F>) -> Var {
        self.leaf(Value::Owned(t), true)
    }

    /// Non-trainable leaf borrowed from the caller.
    pub fn constant(&mut self, t: &'a Tensor<F>) -> Var {
        self.leaf(Value::Borrowed(t), false)
    }

    pub fn constant_owned(&mut self, t: Tensor<F>) -> Var {
        self.leaf(Value::Owned(t), false)
    }

    fn leaf(&mut self, value: Value<'a, F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), "matmul", rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), "transpose", rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), "add", rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), "mul", rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), "scale", rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), "silu", rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), "gelu", rg)
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: F) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (rows, cols) = tx.dims2();
        if tw.len() != cols {
            return Err(shape_err("rms_norm", format!("weight {} vs cols {}", tw.len(), cols)));
        }
        let n = F::from_f64(cols as f64);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = tx.row(i);
            let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(tw.data()).map(|(&v, &w)| v * inv * w));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(weight);
        self.push(out, Op::RmsNorm { x, weight, inv_rms }, "rms_norm", rg)
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfVocab { id, vocab });
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
            rg,
        )
    }

    /// Rotary position embedding over interleaved pairs within each head.
    /// `positions` are explicit per-row position ids.
    pub fn rope(&mut self, x: Var, positions: &[u32], head_dim: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if positions.len() != rows {
            return Err(shape_err("rope", format!("{} positions for {} rows", positions.len(), rows)));
        }
        if head_dim == 0 || !head_dim.is_multiple_of(2) || cols % head_dim != 0 {
            return Err(shape_err("rope", format!("head_dim {} vs cols {}", head_dim, cols)));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for t in 0..half {
                let freq = 1.0 / num_traits::Float::powf(base, (2 * t) as f64 / head_dim as f64);
                let theta = p as f64 * freq;
                cos.push(F::from_f64(num_traits::Float::cos(theta)));
                sin.push(F::from_f64(num_traits::Float::sin(theta)));
            }
        }
        let mut data = tx.data().to_vec();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            for h in 0..cols / head_dim {
                for t in 0..half {
                    let (c, s) = (cos[i * half + t], sin[i * half + t]);
                    let j = h * head_dim + 2 * t;
                    let (x0, x1) = (row[j], row[j + 1]);
                    row[j] = x0 * c - x1 * s;
                    row[j + 1] = x0 * s + x1 * c;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Rope { x, cos, sin, head_dim }, "rope", rg)
    }

    /// Multi-head scaled dot-product attention restricted to visible positions.
    /// Masked positions receive exactly zero weight and are never read.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, rows: &Rc<VisibleRows>, n_heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = tq.dims2();
        if tk.dims2() != (l, d) || tv.dims2() != (l, d) {
            return Err(shape_err(
                "masked_attention",
                format!("q {:?} k {:?} v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if rows.len() != l {
            return Err(shape_err("masked_attention", format!("mask {} vs L {}", rows.len(), l)));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err("masked_attention", format!("{} heads for width {}", n_heads, d)));
        }
        let dh = d / n_heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let nnz = rows.nnz();
        let mut probs = vec![F::zero(); n_heads * nnz];
        let mut out = vec![F::zero(); l * d];
        let mut scores: Vec<F> = Vec::new();
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..l {
                let vis = rows.row(i);
                let qi = &tq.row(i)[cols.clone()];
                scores.clear();
                let mut mx = F::neg_infinity();
                for &j in vis {
                    let s = dot(qi, &tk.row(j)[cols.clone()]) * scale;
                    mx = mx.max(s);
                    scores.push(s);
                }
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum = sum + *s;
                }
                let p = &mut probs[h * nnz + rows.offset(i)..h * nnz + rows.offset(i) + vis.len()];
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = s / sum;
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &pj) in vis.iter().zip(p.iter()) {
                    let vj = &tv.row(j)[cols.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o = *o + pj * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![l, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                rows: rows.clone(),
                n_heads,
                probs,
            },
            "masked_attention",
            rg,
        )
    }

    /// Attention weights recorded by a `masked_attention` node, expanded to a
    /// dense `[n_heads, L, L]` buffer with zeros at masked positions.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<F>> {
        match &self.nodes[node.0].op {
            Op::Attention {
                rows, n_heads, probs, ..
            } => {
                let l = rows.len();
                let nnz = rows.nnz();
                let mut w = vec![F::zero(); n_heads * l * l];
                for h in 0..*n_heads {
                    for i in 0..l {
                        for (idx, &j) in rows.row(i).iter().enumerate() {
                            w[h * l * l + i * l + j] = probs[h * nnz + rows.offset(i) + idx];
                        }
                    }
                }
                Some(w)
            }
            _ => None,
        }
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("cols {} vs {}", t.cols(), c)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows", rg)
    }

    /// Mean over rows of `-Σ_t w_t · log softmax(row)[t]`.
    ///
    /// `targets[r]` lists `(class, count)` pairs for row `r`; counts are
    /// normalized per row, so each row contributes a proper average of
    /// per-token cross entropies.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Vec<(usize, F)>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = tl.dims2();
        if targets.len() != rows {
            return Err(shape_err("softmax_cross_entropy", format!("{} target rows for {} logit rows", targets.len(), rows)));
        }
        let mut norm_targets = Vec::with_capacity(rows);
        for t in targets {
            let total = t.iter().fold(F::zero(), |s, &(_, c)| s + c);
            if t.is_empty() || total <= F::zero() {
                return Err(Error::EmptyTargets);
            }
            let mut nt = Vec::with_capacity(t.len());
            for &(id, c) in t {
                if id >= v {
                    return Err(Error::TokenOutOfVocab { id: id as u32, vocab: v });
                }
                nt.push((id, c / total));
            }
            norm_targets.push(nt);
        }
        let mut probs = Vec::with_capacity(rows * v);
        let mut loss = F::zero();
        for (r, t) in norm_targets.iter().enumerate() {
            let z = tl.row(r);
            let mx = z.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut sum = F::zero();
            let start = probs.len();
            for &x in z {
                let e = (x - mx).exp();
                sum = sum + e;
                probs.push(e);
            }
            for p in &mut probs[start..] {
                *p = *p / sum;
            }
            let lse = mx + sum.ln();
            let mut row_loss = lse;
            for &(id, w) in t {
                row_loss = row_loss - w * z[id];
            }
            loss = loss + row_loss;
        }
        loss = loss / F::from_f64(rows as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: norm_targets,
                probs,
            },
            "softmax_cross_entropy",
            rg,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, _) = tx.dims2();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.len());
        for i in 0..rows {
            let row = tx.row(i);
            let n = dot(row, row).sqrt().max(F::from_f64(1e-12));
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, "l2_normalize_rows", rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != target.len() {
            return Err(shape_err("mse", format!("{} vs {}", tx.len(), target.len())));
        }
        let n = F::from_f64(target.len() as f64);
        let s = tx
            .data()
            .iter()
            .zip(target)
            .fold(F::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            "mse",
            rg,
        )
    }

    /// `Σ x ⊙ weights`, reducing any tensor to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(shape_err("weighted_sum", format!("{} vs {}", tx.len(), weights.len())));
        }
        let s = dot(tx.data(), weights);
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            "weighted_sum",
            rg,
        )
    }

    /// Reverse pass from a scalar node. Returns gradients of every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        for (i, g) in grads.iter_mut().enumerate() {
            let keep = matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad;
            if !keep {
                *g = None;
            } else if let Some(g) = g {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let out = self.nodes[idx].value.get();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.rg(*a) {
                    let bt = transpose(tb.data(), k, n);
                    let buf = grad_buf(grads, *a, m * k);
                    matmul_acc(buf, g, &bt, m, n, k);
                }
                if self.rg(*b) {
                    let at = transpose(ta.data(), m, k);
                    let buf = grad_buf(grads, *b, k * n);
                    matmul_acc(buf, &at, g, k, m, n);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (r, c) = out.dims2();
                    let gt = transpose(g, r, c);
                    add_into(grad_buf(grads, *a, gt.len()), &gt);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.rg(x) {
                        add_into(grad_buf(grads, x, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for ((d, &gi), &bi) in buf.iter_mut().zip(g).zip(tb) {
                        *d = *d + gi * bi;
                    }
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, g.len());
                    for ((d, &gi), &ai) in buf.iter_mut().zip(g).zip(ta) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi * *c;
                    }
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let xs = self.value(*a).data();
                    let buf = grad_buf(grads, *a, g.len());
                    for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(xs) {
                        let s = sigmoid(x);
                        *d = *d + gi * s * (F::one() + x * (F::one() - s));
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xs = self.value(*a).data();
                    let buf = grad_buf(grads, *a, g.len());
                    for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(xs) {
                        *d = *d + gi * gelu_grad(x);
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*weight));
                let (rows, cols) = tx.dims2();
                let n = F::from_f64(cols as f64);
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); rows * cols];
                    for i in 0..rows {
                        let inv = inv_rms[i];
                        let xr = tx.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let mut proj = F::zero();
                        for j in 0..cols {
                            proj = proj + gr[j] * tw.data()[j] * xr[j] * inv;
                        }
                        proj = proj / n;
                        for j in 0..cols {
                            let gw = gr[j] * tw.data()[j];
                            dx[i * cols + j] = inv * (gw - xr[j] * inv * proj);
                        }
                    }
                    add_into(grad_buf(grads, *x, rows * cols), &dx);
                }
                if self.rg(*weight) {
                    let buf = grad_buf(grads, *weight, cols);
                    for i in 0..rows {
                        let inv = inv_rms[i];
                        let xr = tx.row(i);
                        for j in 0..cols {
                            buf[j] = buf[j] + g[i * cols + j] * xr[j] * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let buf = grad_buf(grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * d..(id as usize + 1) * d];
                        add_into(dst, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Rope { x, cos, sin, head_dim } => {
                if self.rg(*x) {
                    let (rows, cols) = out.dims2();
                    let half = head_dim / 2;
                    let buf = grad_buf(grads, *x, rows * cols);
                    for i in 0..rows {
                        for h in 0..cols / head_dim {
                            for t in 0..half {
                                let (c, s) = (cos[i * half + t], sin[i * half + t]);
                                let j = i * cols + h * head_dim + 2 * t;
                                let (g0, g1) = (g[j], g[j + 1]);
                                buf[j] = buf[j] + g0 * c + g1 * s;
                                buf[j + 1] = buf[j + 1] - g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                rows,
                n_heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (l, d) = tq.dims2();
                let dh = d / n_heads;
                let scale = F::one() / F::from_f64(dh as f64).sqrt();
                let nnz = rows.nnz();
                let mut dq = vec![F::zero(); l * d];
                let mut dk = vec![F::zero(); l * d];
                let mut dv = vec![F::zero(); l * d];
                let mut ds: Vec<F> = Vec::new();
                for h in 0..*n_heads {
                    let c0 = h * dh;
                    for i in 0..l {
                        let vis = rows.row(i);
                        let p = &probs[h * nnz + rows.offset(i)..h * nnz + rows.offset(i) + vis.len()];
                        let gi = &g[i * d + c0..i * d + c0 + dh];
                        ds.clear();
                        let mut pdp = F::zero();
                        for (&j, &pj) in vis.iter().zip(p) {
                            let dp = dot(gi, &tv.row(j)[c0..c0 + dh]);
                            ds.push(dp);
                            pdp = pdp + pj * dp;
                            let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                            for (dvv, &gg) in dvj.iter_mut().zip(gi) {
                                *dvv = *dvv + pj * gg;
                            }
                        }
                        let qi = &tq.row(i)[c0..c0 + dh];
                        for ((&j, &pj), &dp) in vis.iter().zip(p).zip(ds.iter()) {
                            let s = pj * (dp - pdp) * scale;
                            if s == F::zero() {
                                continue;
                            }
                            let kj = &tk.row(j)[c0..c0 + dh];
                            let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                            for (a, &b) in dqi.iter_mut().zip(kj) {
                                *a = *a + s * b;
                            }
                            let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                            for (a, &b) in dkj.iter_mut().zip(qi) {
                                *a = *a + s * b;
                            }
                        }
                    }
                }
                for (var, dg) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        add_into(grad_buf(grads, var, l * d), &dg);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let buf = grad_buf(grads, *x, tx.len());
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        add_into(grad_buf(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let tl = self.value(*logits);
                    let (rows, v) = tl.dims2();
                    let scale = g[0] / F::from_f64(rows as f64);
                    let buf = grad_buf(grads, *logits, rows * v);
                    for (r, t) in targets.iter().enumerate() {
                        let row = &mut buf[r * v..(r + 1) * v];
                        for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d = *d + scale * p;
                        }
                        for &(id, w) in t {
                            row[id] = row[id] - scale * w;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.rg(*x) {
                    let (rows, cols) = out.dims2();
                    let buf = grad_buf(grads, *x, rows * cols);
                    for i in 0..rows {
                        let y = out.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yg = dot(y, gr);
                        for j in 0..cols {
                            buf[i * cols + j] = buf[i * cols + j] + (gr[j] - y[j] * yg) / norms[i];
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                if self.rg(*x) {
                    let tx = self.value(*x).data();
                    let c = g[0] * F::from_f64(2.0 / target.len() as f64);
                    let buf = grad_buf(grads, *x, tx.len());
                    for ((d, &a), &b) in buf.iter_mut().zip(tx).zip(target) {
                        *d = *d + c * (a - b);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, weights.len());
                    for (d, &w) in buf.iter_mut().zip(weights) {
                        *d = *d + g[0] * w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_buf<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::from_f64(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

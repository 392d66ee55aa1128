//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every parameter that was read through [`Graph::param`].

use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::{dot, Tensor};

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f64> },
}

/// Block-diagonal multi-head attention layout: `groups` independent sets,
/// each with `nq` query rows and `nk` key/value rows.
#[derive(Debug, Clone, Copy)]
struct AttnShape {
    groups: usize,
    nq: usize,
    nk: usize,
    heads: usize,
    scale: f64,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape over a borrowed parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient is propagated out of it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Read a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Add a `1 × c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = row_map(self.value(a), self.value(row), |x, y| x + y);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiply every row of `a` elementwise by a `1 × c` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = row_map(self.value(a), self.value(row), |x, y| x * y);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = out.row_slice_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(out, Op::LayerNorm { x: a, rstd })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_slice_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row_slice(r));
                off += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_slice_mut(r)
                .copy_from_slice(&x.row_slice(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let out = Tensor::from_vec(
            len,
            x.cols,
            x.data[start * x.cols..(start + len) * x.cols].to_vec(),
        );
        self.push(out, Op::SliceRows { x: a, start })
    }

    /// Output row `r` is row `index[r]` of `a`; rows may repeat or be dropped.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(index.len(), x.cols);
        for (r, &i) in index.iter().enumerate() {
            assert!(i < x.rows, "gather_rows index out of range");
            out.row_slice_mut(r).copy_from_slice(x.row_slice(i));
        }
        self.push(out, Op::GatherRows { x: a, index: index.to_vec() })
    }

    /// Same row-major data viewed as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, x.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_slice_mut(r);
            let n = (dot(row, row) + L2_EPS).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x: a, norms })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len(), "one target per logits row");
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < x.cols, "target index out of range");
            let row = x.row_slice(r);
            loss += log_sum_exp(row) - row[t];
            softmax_in_place(probs.row_slice_mut(r));
        }
        let loss = loss / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Scaled dot-product attention with `heads` heads, applied independently
    /// to consecutive groups: query rows `[g·nq, (g+1)·nq)` attend only to
    /// key/value rows `[g·nk, (g+1)·nk)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, nq: usize, nk: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols;
        assert!(nq > 0 && nk > 0 && heads > 0 && dim % heads == 0, "bad attention shape");
        assert_eq!(qv.rows % nq, 0, "query rows must split into groups");
        let groups = qv.rows / nq;
        assert_eq!(kv.rows, groups * nk, "key rows must match the query groups");
        assert_eq!(vv.rows, kv.rows, "value rows must match key rows");
        assert_eq!(kv.cols, dim, "key width mismatch");
        assert_eq!(vv.cols, dim, "value width mismatch");
        let hd = dim / heads;
        let shape = AttnShape {
            groups,
            nq,
            nk,
            heads,
            scale: 1.0 / (hd as f64).sqrt(),
        };
        let mut out = Tensor::zeros(qv.rows, dim);
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut scores = vec![0.0; nk];
        for gi in 0..groups {
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..nq {
                    let qr = &qv.row_slice(gi * nq + i)[c0..c0 + hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(qr, &kv.row_slice(gi * nk + j)[c0..c0 + hd]) * shape.scale;
                    }
                    softmax_in_place(&mut scores);
                    let base = ((gi * heads + h) * nq + i) * nk;
                    probs[base..base + nk].copy_from_slice(&scores);
                    let orow = &mut out.data[(gi * nq + i) * dim + c0..(gi * nq + i) * dim + c0 + hd];
                    for (j, &p) in scores.iter().enumerate() {
                        let vr = &vv.row_slice(gi * nk + j)[c0..c0 + hd];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, shape, probs })
    }

    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttnShape,
        probs: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols;
        let hd = dim / shape.heads;
        let (nq, nk) = (shape.nq, shape.nk);
        let mut dq = Tensor::zeros(qv.rows, dim);
        let mut dk = Tensor::zeros(kv.rows, dim);
        let mut dv = Tensor::zeros(vv.rows, dim);
        let mut dp = vec![0.0; nk];
        for gi in 0..shape.groups {
            for h in 0..shape.heads {
                let c0 = h * hd;
                for i in 0..nq {
                    let qi = gi * nq + i;
                    let base = ((gi * shape.heads + h) * nq + i) * nk;
                    let p = &probs[base..base + nk];
                    let go = &g.row_slice(qi)[c0..c0 + hd];
                    // dP = dO Vᵀ, dV += Pᵀ dO
                    for j in 0..nk {
                        let kj = gi * nk + j;
                        dp[j] = dot(go, &vv.row_slice(kj)[c0..c0 + hd]);
                        let dvr = &mut dv.data[kj * dim + c0..kj * dim + c0 + hd];
                        for (d, &x) in dvr.iter_mut().zip(go) {
                            *d += p[j] * x;
                        }
                    }
                    // dS = P ⊙ (dP − Σ dP·P), scaled
                    let s: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - s) * shape.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = gi * nk + j;
                        let kr = &kv.data[kj * dim + c0..kj * dim + c0 + hd];
                        let dqr = &mut dq.data[qi * dim + c0..qi * dim + c0 + hd];
                        for (d, &x) in dqr.iter_mut().zip(kr) {
                            *d += ds * x;
                        }
                        let qr = &qv.data[qi * dim + c0..qi * dim + c0 + hd];
                        let dkr = &mut dk.data[kj * dim + c0..kj * dim + c0 + hd];
                        for (d, &x) in dkr.iter_mut().zip(qr) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Reverse pass from a scalar output; returns gradients for every parameter.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(self.params);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, shape, probs);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, col_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row);
                    let da = row_map(&g, rv, |x, y| x * y);
                    let prod = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *row, col_sums(&prod));
                    acc(&mut grads, *a, da);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Gelu(a) => {
                    let da = zip_map(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows, y.cols);
                    let n = y.cols as f64;
                    for r in 0..y.rows {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        let out_r = dx.row_slice_mut(r);
                        for c in 0..gr.len() {
                            out_r[c] = rstd[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let s = dot(gr, yr);
                        let out_r = dx.row_slice_mut(r);
                        for c in 0..gr.len() {
                            out_r[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let dp = Tensor::from_vec(
                            rows,
                            cols,
                            g.data[off * cols..(off + rows) * cols].to_vec(),
                        );
                        off += rows;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_slice_mut(r)[*start..*start + g.cols]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    dx.data[start * cols..(start + g.rows) * cols].copy_from_slice(&g.data);
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.shape(*x);
                    acc(&mut grads, *x, Tensor::from_vec(rows, cols, g.data));
                }
                Op::GatherRows { x, index } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (r, &i) in index.iter().enumerate() {
                        for (d, s) in dx.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let gy = dot(gr, yr);
                        let out_r = dx.row_slice_mut(r);
                        for c in 0..gr.len() {
                            out_r[c] = (gr[c] - yr[c] * gy) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let gv = g.item();
                    acc(&mut grads, *a, Tensor::from_vec(rows, cols, vec![gv; rows * cols]));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    let gv = g.item() / (rows * cols) as f64;
                    acc(&mut grads, *a, Tensor::from_vec(rows, cols, vec![gv; rows * cols]));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.item() / targets.len() as f64;
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dx.data[r * dx.cols + t] -= 1.0;
                    }
                    for v in &mut dx.data {
                        *v *= scale;
                    }
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn row_map(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows, 1, "row operand must have one row");
    assert_eq!(a.cols, row.cols, "row broadcast width mismatch");
    let mut out = a.clone();
    for r in 0..a.rows {
        for (o, &y) in out.row_slice_mut(r).iter_mut().zip(&row.data) {
            *o = f(*o, y);
        }
    }
    out
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

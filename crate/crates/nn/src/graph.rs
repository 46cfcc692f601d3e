//! Tape of dense operations with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every op in creation
//! order, so the tape is already topologically sorted. [`Graph::backward`]
//! walks it in reverse and returns gradients for the parameters reached.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, gemm_strided, MatMut, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

/// Shape and mask of one batched attention call. Queries are laid out as
/// `batch * q_len` rows, keys/values as `batch * k_len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Valid key count per batch item; keys at or past it are padding.
    pub key_lens: Vec<usize>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttnSpec {
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_lens[b] && (!self.causal || j <= i)
    }
}

/// One row of a property-vector embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PvCell {
    Cls,
    Unknown,
    Value(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<f64> },
    DivScalar { x: Var, s: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, targets: Tensor, weights: Vec<f64>, probs: Tensor },
    WeightedSquaredError { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    BceWithLogits { logits: Var, targets: Tensor, weights: Tensor },
    PvEmbed { cells: Vec<PvCell>, cls: Var, unk: Var, w: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records what `backward` needs.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    /// A forward-only graph: nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Tensor::zeros(0, 0),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// `op(a) @ op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        gemm(ta, tb, m, n, k, 1.0, self.value(a).data(), self.value(b).data(), 0.0, out.data_mut());
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// `x @ w + b` with `w` in×out and `b` 1×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.shape(x);
        let (wr, dout) = self.shape(w);
        assert_eq!(din, wr, "linear input width mismatch");
        let mut out = Tensor::zeros(n, dout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), dout);
            for r in 0..n {
                out.row_mut(r).copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(false, false, n, dout, din, 1.0, self.value(x).data(), self.value(w).data(), beta, out.data_mut());
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::from_vec(r, cols, data), Op::Scale(x, c), &[x])
    }

    /// Row-wise layer normalization with 1×d gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (n, d) = self.shape(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let xs = self.value(x);
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = xs.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::from_vec(r, c, data), Op::Gelu(x), &[x])
    }

    /// Rows of `x` at `idx` (repeats allowed). Embedding lookup when `x` is a
    /// table parameter.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let cols = src.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < src.rows(), "gather index {i} out of range {}", src.rows());
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::from_vec(idx.len(), cols, data);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Each row divided by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, d) = t.shape();
        let mut out = Tensor::zeros(n, d);
        let mut norms = vec![0.0; n];
        for r in 0..n {
            let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms[r] = norm;
            for (o, v) in out.row_mut(r).iter_mut().zip(t.row(r)) {
                *o = v / norm;
            }
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// `x / s` for a 1×1 `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let (r, c) = self.shape(x);
        let data = self.value(x).data().iter().map(|v| v / sv).collect();
        self.push(Tensor::from_vec(r, c, data), Op::DivScalar { x, s }, &[x, s])
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (all `heads * d_head` wide).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        assert_eq!(self.shape(v), (kr, kd), "attention: K and V shapes differ");
        assert_eq!(kd, d, "attention: Q and K widths differ");
        assert_eq!(qr, spec.batch * spec.q_len, "attention: query rows");
        assert_eq!(kr, spec.batch * spec.k_len, "attention: key rows");
        assert_eq!(spec.key_lens.len(), spec.batch);
        assert_eq!(d % spec.heads, 0, "width not divisible by heads");
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, h) = (spec.q_len, spec.k_len, spec.heads);
        let mut probs = vec![0.0; spec.batch * h * tq * tk];
        let mut out = Tensor::zeros(qr, d);
        let qd = self.value(q).data();
        let kd_ = self.value(k).data();
        let vd = self.value(v).data();
        for b in 0..spec.batch {
            for hh in 0..h {
                let p_off = (b * h + hh) * tq * tk;
                let p = &mut probs[p_off..p_off + tq * tk];
                gemm_strided(
                    tq,
                    tk,
                    dh,
                    scale,
                    MatRef::new(qd, b * tq * d + hh * dh, d, 1),
                    MatRef::new(kd_, b * tk * d + hh * dh, 1, d),
                    0.0,
                    MatMut::new(p, 0, tk, 1),
                );
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    softmax_masked(row, |j| spec.allowed(b, i, j));
                }
                gemm_strided(
                    tq,
                    dh,
                    tk,
                    1.0,
                    MatRef::new(p, 0, tk, 1),
                    MatRef::new(vd, b * tk * d + hh * dh, d, 1),
                    0.0,
                    MatMut::new(out.data_mut(), b * tq * d + hh * dh, d, 1),
                );
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Softmax weights of an attention node as `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// `sum_r w_r * H(targets_r, softmax(logits_r))`, a 1×1 result.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor, weights: Vec<f64>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape(), "cross-entropy target shape");
        assert_eq!(weights.len(), l.rows());
        let mut probs = Tensor::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for r in 0..l.rows() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = probs.row_mut(r);
            let mut h = 0.0;
            for j in 0..row.len() {
                let logp = row[j] - lse;
                p[j] = logp.exp();
                let t = targets.get(r, j);
                if t != 0.0 {
                    h -= t * logp;
                }
            }
            loss += weights[r] * h;
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, targets, weights, probs },
            &[logits],
        )
    }

    /// `sum_i w_i * (pred_i - target_i)^2` over an n×1 prediction.
    pub fn weighted_squared_error(&mut self, pred: Var, target: Vec<f64>, weights: Vec<f64>) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len());
        assert_eq!(p.len(), weights.len());
        let loss = p
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| if *w == 0.0 { 0.0 } else { w * (p - t).powi(2) })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::WeightedSquaredError { pred, target, weights },
            &[pred],
        )
    }

    /// `sum w * (softplus(x) - y x)`, elementwise binary cross-entropy.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor, weights: Tensor) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape());
        assert_eq!(l.shape(), weights.shape());
        let loss = l
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .map(|((&x, &y), &w)| if w == 0.0 { 0.0 } else { w * (softplus(x) - y * x) })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets, weights },
            &[logits],
        )
    }

    /// Property-vector rows: `[CLS]` vector, `[UNK]` vector, or
    /// `value * w + b` (all 1×d).
    pub fn pv_embed(&mut self, cells: &[PvCell], cls: Var, unk: Var, w: Var, b: Var) -> Var {
        let d = self.shape(w).1;
        let (cv, uv, wv, bv) = (
            self.value(cls).data(),
            self.value(unk).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Tensor::zeros(cells.len(), d);
        for (r, cell) in cells.iter().enumerate() {
            let o = out.row_mut(r);
            match *cell {
                PvCell::Cls => o.copy_from_slice(cv),
                PvCell::Unknown => o.copy_from_slice(uv),
                PvCell::Value(x) => {
                    for j in 0..d {
                        o[j] = x * wv[j] + bv[j];
                    }
                }
            }
        }
        self.push(
            out,
            Op::PvEmbed { cells: cells.to_vec(), cls, unk, w, b },
            &[cls, unk, w, b],
        )
    }

    /// Sum of 1×1 nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(self.params);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &gy, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>], out: &mut Grads) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out.slots[id.index()] {
                Some(t) => t.add_assign(gy),
                slot => *slot = Some(gy.clone()),
            },
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (m, n) = gy.shape();
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = if ta { av.rows() } else { av.cols() };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = dY @ op(B)^T, laid out like A.
                    if ta {
                        gemm(tb, true, k, m, n, 1.0, bv.data(), gy.data(), 1.0, ga.data_mut());
                    } else {
                        gemm(false, !tb, m, k, n, 1.0, gy.data(), bv.data(), 1.0, ga.data_mut());
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB = op(A)^T @ dY, laid out like B.
                    if tb {
                        gemm(true, ta, n, k, m, 1.0, gy.data(), av.data(), 1.0, gb.data_mut());
                    } else {
                        gemm(!ta, false, k, n, m, 1.0, av.data(), gy.data(), 1.0, gb.data_mut());
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, dout) = gy.shape();
                let din = self.shape(*x).1;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gemm(false, true, n, din, dout, 1.0, gy.data(), self.value(*w).data(), 1.0, gx.data_mut());
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    gemm(true, false, din, dout, n, 1.0, self.value(*x).data(), gy.data(), 1.0, gw.data_mut());
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_slot(grads, *b) {
                        let gbd = gb.data_mut();
                        for r in 0..n {
                            for (acc, g) in gbd.iter_mut().zip(gy.row(r)) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.grad_slot(grads, v) {
                        g.add_assign(gy);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (acc, v) in g.data_mut().iter_mut().zip(gy.data()) {
                        *acc += c * v;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, d) = gy.shape();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    let gd = gg.data_mut();
                    for r in 0..n {
                        for j in 0..d {
                            gd[j] += gy.get(r, j) * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let gd = gb.data_mut();
                    for r in 0..n {
                        for (acc, g) in gd.iter_mut().zip(gy.row(r)) {
                            *acc += g;
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let gyr = gy.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gyr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let row = gx.row_mut(r);
                        for j in 0..d {
                            row[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((acc, &v), &d) in g.data_mut().iter_mut().zip(xv).zip(gy.data()) {
                        *acc += d * gelu_grad(v);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for (acc, v) in g.row_mut(src).iter_mut().zip(gy.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let cols = gy.cols();
                    if let Some(g) = self.grad_slot(grads, p) {
                        for (acc, v) in g.data_mut().iter_mut().zip(&gy.data()[off * cols..(off + rows) * cols]) {
                            *acc += v;
                        }
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if let Some(g) = self.grad_slot(grads, p) {
                        for r in 0..gy.rows() {
                            for (acc, v) in g.row_mut(r).iter_mut().zip(&gy.row(r)[off..off + cols]) {
                                *acc += v;
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((acc, &yv), &gv) in g.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += (gv - yv * dot) / norms[r];
                        }
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).item();
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (acc, v) in g.data_mut().iter_mut().zip(gy.data()) {
                        *acc += v / sv;
                    }
                }
                let xv = self.value(*x).data();
                if let Some(g) = self.grad_slot(grads, *s) {
                    let dot: f64 = xv.iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                    g.data_mut()[0] -= dot / (sv * sv);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, gy, grads);
            }
            Op::SoftCrossEntropy { logits, targets, weights, probs } => {
                let scale = gy.item();
                if let Some(g) = self.grad_slot(grads, *logits) {
                    for r in 0..probs.rows() {
                        let w = weights[r] * scale;
                        if w == 0.0 {
                            continue;
                        }
                        let tsum: f64 = targets.row(r).iter().sum();
                        let pr = probs.row(r);
                        let tr = targets.row(r);
                        for (j, acc) in g.row_mut(r).iter_mut().enumerate() {
                            *acc += w * (pr[j] * tsum - tr[j]);
                        }
                    }
                }
            }
            Op::WeightedSquaredError { pred, target, weights } => {
                let scale = gy.item();
                let pv = self.value(*pred).data();
                if let Some(g) = self.grad_slot(grads, *pred) {
                    for (i, acc) in g.data_mut().iter_mut().enumerate() {
                        if weights[i] != 0.0 {
                            *acc += scale * 2.0 * weights[i] * (pv[i] - target[i]);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let scale = gy.item();
                let lv = self.value(*logits).data();
                if let Some(g) = self.grad_slot(grads, *logits) {
                    for (i, acc) in g.data_mut().iter_mut().enumerate() {
                        let w = weights.data()[i];
                        if w != 0.0 {
                            *acc += scale * w * (sigmoid(lv[i]) - targets.data()[i]);
                        }
                    }
                }
            }
            Op::PvEmbed { cells, cls, unk, w, b } => {
                let d = gy.cols();
                let mut dcls = vec![0.0; d];
                let mut dunk = vec![0.0; d];
                let mut dw = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, cell) in cells.iter().enumerate() {
                    let gr = gy.row(r);
                    match *cell {
                        PvCell::Cls => dcls.iter_mut().zip(gr).for_each(|(a, g)| *a += g),
                        PvCell::Unknown => dunk.iter_mut().zip(gr).for_each(|(a, g)| *a += g),
                        PvCell::Value(x) => {
                            for j in 0..d {
                                dw[j] += x * gr[j];
                                db[j] += gr[j];
                            }
                        }
                    }
                }
                for (var, delta) in [(*cls, dcls), (*unk, dunk), (*w, dw), (*b, db)] {
                    if let Some(g) = self.grad_slot(grads, var) {
                        g.data_mut().iter_mut().zip(&delta).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let d = gy.cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, h) = (spec.q_len, spec.k_len, spec.heads);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let need = |var: Var| self.nodes[var.0].needs_grad;
        let (need_q, need_k, need_v) = (need(q), need(k), need(v));
        let mut gq = need_q.then(|| Tensor::zeros(spec.batch * tq, d));
        let mut gk = need_k.then(|| Tensor::zeros(spec.batch * tk, d));
        let mut gv = need_v.then(|| Tensor::zeros(spec.batch * tk, d));
        let mut ds = vec![0.0; tq * tk];
        for b in 0..spec.batch {
            for hh in 0..h {
                let p = &probs[(b * h + hh) * tq * tk..(b * h + hh + 1) * tq * tk];
                let dy = MatRef::new(gy.data(), b * tq * d + hh * dh, d, 1);
                if let Some(gv) = gv.as_mut() {
                    // dV = P^T dY
                    gemm_strided(
                        tk,
                        dh,
                        tq,
                        1.0,
                        MatRef::new(p, 0, 1, tk),
                        dy,
                        1.0,
                        MatMut::new(gv.data_mut(), b * tk * d + hh * dh, d, 1),
                    );
                }
                if !(need_q || need_k) {
                    continue;
                }
                // dP = dY V^T
                gemm_strided(
                    tq,
                    tk,
                    dh,
                    1.0,
                    dy,
                    MatRef::new(vd, b * tk * d + hh * dh, 1, d),
                    0.0,
                    MatMut::new(&mut ds, 0, tk, 1),
                );
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut ds[i * tk..(i + 1) * tk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm_strided(
                        tq,
                        dh,
                        tk,
                        1.0,
                        MatRef::new(&ds, 0, tk, 1),
                        MatRef::new(kd, b * tk * d + hh * dh, d, 1),
                        1.0,
                        MatMut::new(gq.data_mut(), b * tq * d + hh * dh, d, 1),
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm_strided(
                        tk,
                        dh,
                        tq,
                        1.0,
                        MatRef::new(&ds, 0, 1, tk),
                        MatRef::new(qd, b * tq * d + hh * dh, d, 1),
                        1.0,
                        MatMut::new(gk.data_mut(), b * tk * d + hh * dh, d, 1),
                    );
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if let (Some(g), Some(slot)) = (g, self.grad_slot(grads, var)) {
                slot.add_assign(&g);
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }
}

fn softmax_masked(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if allowed(j) && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

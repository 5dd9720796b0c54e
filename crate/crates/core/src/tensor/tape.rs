use std::rc::Rc;

use super::{gemm, matrix_dims, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: a contiguous run of query rows attending to a
/// contiguous run of key/value rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `0..=i` of the block.
    pub causal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    pub blocks: Vec<AttnBlock>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Vec<f64>),
    /// Input and the tanh term of the forward pass.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    WeightedSum(Var, Vec<f64>),
    MeanRows {
        x: Var,
        groups: Vec<(usize, usize)>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Rc<AttnSpec>,
        probs: Vec<f64>,
    },
    SegmentDot {
        a: Var,
        b: Var,
        groups: Vec<(usize, usize)>,
    },
    Hinge {
        scores: Var,
        segs: Vec<(usize, usize)>,
        answers: Vec<usize>,
        wrong: Vec<usize>,
        active: Vec<bool>,
    },
    Dropout(Var, Vec<f64>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run operation recorder.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a single reverse sweep is a valid backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(self.shape(v))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        // Internal constructor; every caller sizes `data` from `shape`.
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Self::tensor(vec![m, n], out), Op::MatMul(a, b), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Self::tensor(shape, data), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(name, Self::tensor(shape, data), op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let th: Vec<f64> = x.iter().map(|&x| (GELU_C * (x + 0.044715 * x * x * x)).tanh()).collect();
        let data = x.iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("gelu", Self::tensor(shape, data), Op::Gelu(a, th), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        self.push("reshape", t, Op::Reshape(a), needs)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).numel() != n {
            return shape_err(format!(
                "bias of {} values for rows of width {n}",
                self.value(bias).numel()
            ));
        }
        let bd = self.data(bias);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        let shape = self.shape(a).to_vec();
        debug_assert_eq!(out.len(), m * n);
        self.push("add_bias", Self::tensor(shape, out), Op::AddBias(a, bias), needs)
    }

    /// Multiplies row `i` by the constant `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if c.len() != m {
            return shape_err(format!("{} row scales for {m} rows", c.len()));
        }
        let mut out = self.data(a).to_vec();
        for (row, s) in out.chunks_mut(n).zip(&c) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("scale_rows", Self::tensor(shape, out), Op::ScaleRows(a, c), needs)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("softmax", Self::tensor(shape, out), Op::Softmax(a), needs)
    }

    /// Per-row normalisation to zero mean and unit variance (epsilon 1e-5
    /// inside the square root), followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return shape_err(format!("layer_norm affine width mismatch for d = {d}"));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            Self::tensor(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Sums each row of an `m×n` matrix into a length-`m` vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.data(a).chunks(n).map(|r| r.iter().sum()).collect();
        let needs = self.needs(a);
        self.push("row_sum", Self::tensor(vec![m], out), Op::RowSum(a), needs)
    }

    /// `Σ_i w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        if w.len() != self.value(a).numel() {
            return shape_err(format!(
                "{} weights for {} values",
                w.len(),
                self.value(a).numel()
            ));
        }
        let s = self.data(a).iter().zip(&w).map(|(x, w)| x * w).sum();
        let needs = self.needs(a);
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum(a, w), needs)
    }

    /// Averages each `(start, len)` run of rows into one output row.
    pub fn mean_rows(&mut self, x: Var, groups: Vec<(usize, usize)>) -> Result<Var> {
        let (m, d) = self.dims(x);
        let xs = self.data(x);
        let mut out = vec![0.0; groups.len() * d];
        for (g, &(s, len)) in groups.iter().enumerate() {
            if len == 0 {
                return Err(Error::Contract("mean over an empty row group".into()));
            }
            if s + len > m {
                return shape_err(format!("row group {s}+{len} exceeds {m} rows"));
            }
            let o = &mut out[g * d..(g + 1) * d];
            for r in s..s + len {
                for (oc, v) in o.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                    *oc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        let needs = self.needs(x);
        let n = groups.len();
        self.push("mean_rows", Self::tensor(vec![n, d], out), Op::MeanRows { x, groups }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (m, d) = self.dims(x);
        if idx.is_empty() {
            return shape_err("gather of zero rows".into());
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= m {
                return shape_err(format!("row {i} out of range for {m} rows"));
            }
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        let n = idx.len();
        self.push("gather_rows", Self::tensor(vec![n, d], out), Op::GatherRows { x, idx }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero parts".into());
        };
        let (_, d) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, dp) = self.dims(p);
            if dp != d {
                return shape_err(format!("concat width {dp} vs {d}"));
            }
            out.extend_from_slice(self.data(p));
            rows += m;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            Self::tensor(vec![rows, d], out),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    /// Multi-head scaled dot-product attention over row blocks.
    ///
    /// `q` is `Rq×d`, `k` and `v` are `Rk×d`; `d` is split evenly across
    /// `spec.heads`. Query rows not covered by any block produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Rc<AttnSpec>) -> Result<Var> {
        let (rq, d) = self.dims(q);
        let (rk, dk) = self.dims(k);
        let (rv, dv) = self.dims(v);
        if dk != d || dv != d || rk != rv {
            return shape_err(format!(
                "attention shapes q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let h = spec.heads;
        if h == 0 || d % h != 0 {
            return shape_err(format!("width {d} not divisible by {h} heads"));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for b in &spec.blocks {
            if b.q_start + b.q_len > rq || b.k_start + b.k_len > rk || b.k_len == 0 {
                return shape_err("attention block outside its tensors".into());
            }
            if b.causal && b.q_len > b.k_len {
                return shape_err("causal block needs at least as many keys as queries".into());
            }
            for head in 0..h {
                let off = head * dh;
                for i in 0..b.q_len {
                    let qi = &qs[(b.q_start + i) * d + off..][..dh];
                    let visible = if b.causal { i + 1 } else { b.k_len };
                    scores.clear();
                    for j in 0..visible {
                        let kj = &ks[(b.k_start + j) * d + off..][..dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let oi = &mut out[(b.q_start + i) * d + off..][..dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vs[(b.k_start + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            Self::tensor(vec![rq, d], out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            needs,
        )
    }

    /// `out[r] = a[g] · b[r]` for every row `r` of `b` in group `g`.
    pub fn segment_dot(&mut self, a: Var, b: Var, groups: Vec<(usize, usize)>) -> Result<Var> {
        let (ga, d) = self.dims(a);
        let (rb, db) = self.dims(b);
        if d != db {
            return shape_err(format!("segment_dot widths {d} vs {db}"));
        }
        if groups.len() != ga {
            return shape_err(format!("{} groups for {ga} rows", groups.len()));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; rb];
        for (g, &(s, len)) in groups.iter().enumerate() {
            if s + len > rb {
                return shape_err("segment outside candidate rows".into());
            }
            let ag = &ad[g * d..(g + 1) * d];
            for r in s..s + len {
                out[r] = dot(ag, &bd[r * d..(r + 1) * d]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("segment_dot", Self::tensor(vec![rb], out), Op::SegmentDot { a, b, groups }, needs)
    }

    /// Margin loss `max(0, delta - (s_c - s_w))` per segment, where `s_w`
    /// is the best-scoring incorrect entry (lowest index on ties).
    pub fn hinge(
        &mut self,
        scores: Var,
        segs: Vec<(usize, usize)>,
        answers: Vec<usize>,
        delta: f64,
    ) -> Result<Var> {
        if segs.len() != answers.len() || segs.is_empty() {
            return shape_err("hinge needs one answer per segment".into());
        }
        let sd = self.data(scores);
        let mut out = Vec::with_capacity(segs.len());
        let mut wrong = Vec::with_capacity(segs.len());
        let mut active = Vec::with_capacity(segs.len());
        for (&(s, len), &ans) in segs.iter().zip(&answers) {
            if len < 2 {
                return Err(Error::Contract("hinge loss needs at least two candidates".into()));
            }
            if ans >= len || s + len > sd.len() {
                return Err(Error::Contract(format!("answer {ans} outside {len} candidates")));
            }
            let seg = &sd[s..s + len];
            let w = best_wrong(seg, ans);
            let l = delta - (seg[ans] - seg[w]);
            out.push(l.max(0.0));
            wrong.push(w);
            active.push(l > 0.0);
        }
        let needs = self.needs(scores);
        let n = out.len();
        self.push(
            "hinge",
            Self::tensor(vec![n], out),
            Op::Hinge {
                scores,
                segs,
                answers,
                wrong,
                active,
            },
            needs,
        )
    }

    /// Inverted dropout with a caller-supplied keep mask (0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return shape_err("dropout mask size".into());
        }
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("dropout", Self::tensor(shape, data), Op::Dropout(a, mask), needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    let bd = self.data(*b);
                    self.acc(grads, *a, |da| gemm(m, n, k, g, false, bd, true, 1.0, da));
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    self.acc(grads, *b, |db| gemm(k, m, n, ad, true, g, false, 1.0, db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::AddBias(a, bias) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                let (_, n) = self.dims(*a);
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::ScaleRows(a, c) => {
                let (_, n) = self.dims(*a);
                self.acc(grads, *a, |d| {
                    for ((drow, grow), s) in d.chunks_mut(n).zip(g.chunks(n)).zip(c) {
                        axpy(drow, grow, *s);
                    }
                });
            }
            Op::Gelu(a, th) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for (((d, g), &x), &t) in d.iter_mut().zip(g).zip(x).zip(th) {
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (_, n) = self.dims(*a);
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (_, dim) = self.dims(*x);
                let gd = self.data(*gain);
                self.acc(grads, *gain, |d| {
                    for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, g), h) in d.iter_mut().zip(grow).zip(hrow) {
                            *d += g * h;
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for grow in g.chunks(dim) {
                        axpy(d, grow, 1.0);
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dh = vec![0.0; dim];
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(xhat.chunks(dim))
                        .enumerate()
                    {
                        for c in 0..dim {
                            dh[c] = grow[c] * gd[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / dim as f64;
                        let m2 = dot(&dh, hrow) / dim as f64;
                        for c in 0..dim {
                            drow[c] += inv_std[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::RowSum(a) => {
                let (_, n) = self.dims(*a);
                self.acc(grads, *a, |d| {
                    for (drow, gr) in d.chunks_mut(n).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gr);
                    }
                });
            }
            Op::WeightedSum(a, w) => self.acc(grads, *a, |d| axpy(d, w, g[0])),
            Op::MeanRows { x, groups } => {
                let (_, dim) = self.dims(*x);
                self.acc(grads, *x, |d| {
                    for (gi, &(s, len)) in groups.iter().enumerate() {
                        let grow = &g[gi * dim..(gi + 1) * dim];
                        for r in s..s + len {
                            axpy(&mut d[r * dim..(r + 1) * dim], grow, 1.0 / len as f64);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (_, dim) = self.dims(*x);
                self.acc(grads, *x, |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * dim..(i + 1) * dim], &g[o * dim..(o + 1) * dim], 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::SegmentDot { a, b, groups } => {
                let (_, dim) = self.dims(*a);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for (gi, &(s, len)) in groups.iter().enumerate() {
                        let drow = &mut d[gi * dim..(gi + 1) * dim];
                        for r in s..s + len {
                            axpy(drow, &bd[r * dim..(r + 1) * dim], g[r]);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for (gi, &(s, len)) in groups.iter().enumerate() {
                        let arow = &ad[gi * dim..(gi + 1) * dim];
                        for r in s..s + len {
                            axpy(&mut d[r * dim..(r + 1) * dim], arow, g[r]);
                        }
                    }
                });
            }
            Op::Hinge {
                scores,
                segs,
                answers,
                wrong,
                active,
            } => {
                self.acc(grads, *scores, |d| {
                    for i in 0..segs.len() {
                        if active[i] {
                            let s = segs[i].0;
                            d[s + answers[i]] -= g[i];
                            d[s + wrong[i]] += g[i];
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.acc(grads, *a, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                });
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
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rq, d) = self.dims(q);
        let (rk, _) = self.dims(k);
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; rq * d];
        let mut dk = vec![0.0; rk * d];
        let mut dv = vec![0.0; rk * d];
        let mut pos = 0;
        let mut dp = Vec::new();
        for b in &spec.blocks {
            for head in 0..h {
                let off = head * dh;
                for i in 0..b.q_len {
                    let visible = if b.causal { i + 1 } else { b.k_len };
                    let p = &probs[pos..pos + visible];
                    pos += visible;
                    let qrow = (b.q_start + i) * d + off;
                    let go = &g[qrow..qrow + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = (b.k_start + j) * d + off;
                        dp.push(dot(go, &vs[vrow..vrow + dh]));
                        axpy(&mut dv[vrow..vrow + dh], go, pj);
                    }
                    let s = dot(&dp, p);
                    for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                        let ds = pj * (dpj - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b.k_start + j) * d + off;
                        axpy(&mut dq[qrow..qrow + dh], &ks[krow..krow + dh], ds);
                        axpy(&mut dk[krow..krow + dh], &qs[qrow..qrow + dh], ds);
                    }
                }
            }
        }
        self.acc(grads, q, |d| axpy(d, &dq, 1.0));
        self.acc(grads, k, |d| axpy(d, &dk, 1.0));
        self.acc(grads, v, |d| axpy(d, &dv, 1.0));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Index of the highest entry other than `exclude`, lowest index on ties.
pub(crate) fn best_wrong(seg: &[f64], exclude: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &s) in seg.iter().enumerate() {
        if j != exclude && (best == usize::MAX || s > seg[best]) {
            best = j;
        }
    }
    best
}

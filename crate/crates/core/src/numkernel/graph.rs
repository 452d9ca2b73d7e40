//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` walks it in reverse. Leaves created with
//! [`Graph::constant`] never receive gradients and any node whose inputs are
//! all constant is skipped during the reverse sweep; the frozen backbone is
//! fed in this way so prompt tuning never pays for weight gradients.

use std::fmt;

use super::matrix::{gemm_nn, gemm_nt, gemm_tn, Matrix};
use crate::error::{Error, Result};

/// Epsilon added to the variance in `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A scalar loss together with the node that produced it.
#[derive(Debug, Clone, Copy)]
pub struct LossScalar {
    pub value: f64,
    pub node: NodeId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    RowwiseScale(NodeId, NodeId),
    BlockwiseScale {
        x: NodeId,
        z: NodeId,
        width: usize,
    },
    ConcatRows(NodeId, NodeId),
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    MeanRows {
        x: NodeId,
        from: usize,
        to: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    SumAll(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBT(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::RowwiseScale(..) => "rowwise_scale",
            Op::BlockwiseScale { .. } => "blockwise_scale",
            Op::ConcatRows(..) => "concat_rows",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::GatherRows { .. } => "gather_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::MeanRows { .. } => "mean_rows",
            Op::Attention { .. } => "attention",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
}

/// Single-owner computation graph. Build it, call [`Graph::backward`] once,
/// read gradients, drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if the node was
    /// reachable from the loss and requires a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient, or zeros of the node's shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by {}", op.tag());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_open(&self) -> Result<()> {
        if self.backward_done {
            return Err(Error::state("graph already differentiated; build a new graph"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a × bᵀ`, used for tied output projections.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "matmul_bt",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm_nt(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulBT(a, b), out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape(),
                rhs: rv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Op::AddRow(x, row), out, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_open()?;
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Scale(x, c), out, rg))
    }

    /// `out[i, j] = s[i] · x[i, j]` with `s` an m×1 column.
    pub fn rowwise_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::Dimension {
                op: "rowwise_scale",
                lhs: xv.shape(),
                rhs: sv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let f = sv.get(r, 0);
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::RowwiseScale(x, s), out, rg))
    }

    /// `out[i, j] = z[i, j / w] · x[i, j]` where `w = e / k` is the piece width.
    pub fn blockwise_scale(&mut self, x: NodeId, z: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (xv, zv) = (self.value(x), self.value(z));
        if zv.rows() != xv.rows() || zv.cols() == 0 {
            return Err(Error::Dimension {
                op: "blockwise_scale",
                lhs: xv.shape(),
                rhs: zv.shape(),
            });
        }
        let (e, k) = (xv.cols(), zv.cols());
        if e % k != 0 {
            return Err(Error::Divisibility {
                what: "blockwise_scale embedding width e by piece count k",
                numerator: e,
                divisor: k,
            });
        }
        let width = e / k;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let zr = zv.row(r);
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v *= zr[j / width];
            }
        }
        let rg = self.rg(&[x, z]);
        Ok(self.push(Op::BlockwiseScale { x, z, width }, out, rg))
    }

    /// Stacks `top` above `bottom`.
    pub fn concat_rows(&mut self, top: NodeId, bottom: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (tv, bv) = (self.value(top), self.value(bottom));
        if tv.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: tv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut data = Vec::with_capacity(tv.len() + bv.len());
        data.extend_from_slice(tv.data());
        data.extend_from_slice(bv.data());
        let out = Matrix::from_vec(tv.rows() + bv.rows(), tv.cols(), data)?;
        let rg = self.rg(&[top, bottom]);
        Ok(self.push(Op::ConcatRows(top, bottom), out, rg))
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check_open()?;
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: tv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check_open()?;
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (r, &src) in rows.iter().enumerate() {
            if src >= xv.rows() {
                return Err(Error::Index {
                    what: "gather_rows source",
                    index: src,
                    bound: xv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GatherRows { x, rows: rows.to_vec() }, out, rg))
    }

    /// Row-wise layer normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let e = xv.cols();
        for p in [gv, bv] {
            if p.shape() != (1, e) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xv.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let mut xhat = Matrix::zeros(xv.rows(), e);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), e);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(0.0, |a, v| a + v) / e as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / e as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for j in 0..e {
                o[j] = xhat.get(r, j) * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gelu(x), out, rg))
    }

    /// Mean of rows `from..to`, producing a 1×n row.
    pub fn mean_rows(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.check_open()?;
        let xv = self.value(x);
        if from >= to || to > xv.rows() {
            return Err(Error::range(format!(
                "mean_rows over {from}..{to} of a matrix with {} rows",
                xv.rows()
            )));
        }
        let mut out = Matrix::zeros(1, xv.cols());
        for r in from..to {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / (to - from) as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MeanRows { x, from, to }, out, rg))
    }

    /// Bidirectional multi-head scaled dot-product attention over T×e inputs.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        self.check_open()?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.cols() != kv.cols() || kv.shape() != vv.shape() {
            return Err(Error::Dimension {
                op: "attention",
                lhs: qv.shape(),
                rhs: kv.shape(),
            });
        }
        let e = qv.cols();
        if heads == 0 || e % heads != 0 {
            return Err(Error::Divisibility {
                what: "attention width by head count",
                numerator: e,
                divisor: heads,
            });
        }
        let (tq, tk) = (qv.rows(), kv.rows());
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = Matrix::zeros(tq, e);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qd[i * e + off..i * e + off + dh];
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kd[j * e + off..j * e + off + dh];
                    let mut s = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    *pj = s * scale;
                    max = max.max(*pj);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.data_mut()[i * e + off..i * e + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[j * e + off..j * e + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Op::Attention { q, k, v, heads, probs }, out, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<LossScalar> {
        self.check_open()?;
        let lv = self.value(logits);
        let (b, c) = lv.shape();
        if b == 0 || labels.len() != b {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: lv.shape(),
                rhs: (labels.len(), 1),
            });
        }
        let mut probs = Matrix::zeros(b, c);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    bound: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut z = 0.0;
            for &v in row {
                z += (v - max).exp();
            }
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = total / b as f64;
        let rg = self.rg(&[logits]);
        let node = self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Matrix::scalar(value),
            rg,
        );
        Ok(LossScalar { value, node })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SumAll(x), Matrix::scalar(s), rg))
    }

    /// Populates `grad` on every node reachable from `loss` that requires
    /// one. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::state("backward already called on this graph"));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            backprop_node(&rest[0], &g, before);
            rest[0].grad = Some(g);
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn accumulate(nodes: &mut [Node], id: NodeId, contrib: Matrix) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn wants(nodes: &[Node], id: NodeId) -> bool {
    nodes[id.0].requires_grad
}

fn backprop_node(node: &Node, g: &Matrix, nodes: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            if wants(nodes, a) {
                let bv = &nodes[b.0].value;
                let mut ga = Matrix::zeros(g.rows(), bv.rows());
                gemm_nt(g, bv, &mut ga);
                accumulate(nodes, a, ga);
            }
            if wants(nodes, b) {
                let av = &nodes[a.0].value;
                let mut gb = Matrix::zeros(av.cols(), g.cols());
                gemm_tn(av, g, &mut gb);
                accumulate(nodes, b, gb);
            }
        }
        Op::MatMulBT(a, b) => {
            // out = a bᵀ: da = g b, db = gᵀ a
            let (a, b) = (*a, *b);
            if wants(nodes, a) {
                let bv = &nodes[b.0].value;
                let mut ga = Matrix::zeros(g.rows(), bv.cols());
                gemm_nn(g, bv, &mut ga);
                accumulate(nodes, a, ga);
            }
            if wants(nodes, b) {
                let av = &nodes[a.0].value;
                let mut gb = Matrix::zeros(g.cols(), av.cols());
                gemm_tn(g, av, &mut gb);
                accumulate(nodes, b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.clone());
            accumulate(nodes, *b, g.clone());
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, *x, g.clone());
            if wants(nodes, *row) {
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(nodes, *row, gr);
            }
        }
        Op::Scale(x, c) => {
            let mut gx = g.clone();
            gx.scale_in_place(*c);
            accumulate(nodes, *x, gx);
        }
        Op::RowwiseScale(x, s) => {
            let (x, s) = (*x, *s);
            if wants(nodes, x) {
                let sv = &nodes[s.0].value;
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let f = sv.get(r, 0);
                    for v in gx.row_mut(r) {
                        *v *= f;
                    }
                }
                accumulate(nodes, x, gx);
            }
            if wants(nodes, s) {
                let xv = &nodes[x.0].value;
                let mut gs = Matrix::zeros(xv.rows(), 1);
                for r in 0..xv.rows() {
                    let mut acc = 0.0;
                    for (a, b) in g.row(r).iter().zip(xv.row(r)) {
                        acc += a * b;
                    }
                    gs.set(r, 0, acc);
                }
                accumulate(nodes, s, gs);
            }
        }
        Op::BlockwiseScale { x, z, width } => {
            let (x, z, width) = (*x, *z, *width);
            if wants(nodes, x) {
                let zv = &nodes[z.0].value;
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let zr = zv.row(r);
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v *= zr[j / width];
                    }
                }
                accumulate(nodes, x, gx);
            }
            if wants(nodes, z) {
                let xv = &nodes[x.0].value;
                let k = xv.cols() / width;
                let mut gz = Matrix::zeros(xv.rows(), k);
                for r in 0..xv.rows() {
                    let (gr, xr) = (g.row(r), xv.row(r));
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in c * width..(c + 1) * width {
                            acc += gr[j] * xr[j];
                        }
                        gz.set(r, c, acc);
                    }
                }
                accumulate(nodes, z, gz);
            }
        }
        Op::ConcatRows(top, bottom) => {
            let (top, bottom) = (*top, *bottom);
            let split = nodes[top.0].value.rows() * g.cols();
            if wants(nodes, top) {
                let gt = Matrix::from_vec(split / g.cols().max(1), g.cols(), g.data()[..split].to_vec())
                    .expect("concat split");
                accumulate(nodes, top, gt);
            }
            if wants(nodes, bottom) {
                let rows = nodes[bottom.0].value.rows();
                let gb = Matrix::from_vec(rows, g.cols(), g.data()[split..].to_vec()).expect("concat split");
                accumulate(nodes, bottom, gb);
            }
        }
        Op::EmbeddingLookup { table, ids } => {
            if wants(nodes, *table) {
                let tv = &nodes[table.0].value;
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(nodes, *table, gt);
            }
        }
        Op::GatherRows { x, rows } => {
            if wants(nodes, *x) {
                let xv = &nodes[x.0].value;
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(nodes, *x, gx);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let e = xhat.cols();
            if wants(nodes, x) {
                let gv = &nodes[gain.0].value;
                let mut gx = Matrix::zeros(xhat.rows(), e);
                let mut dxh = vec![0.0; e];
                for r in 0..xhat.rows() {
                    let (gr, xh) = (g.row(r), xhat.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..e {
                        dxh[j] = gr[j] * gv.data()[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xh[j];
                    }
                    mean_d /= e as f64;
                    mean_dx /= e as f64;
                    let inv = inv_std[r];
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxh[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(nodes, x, gx);
            }
            if wants(nodes, gain) {
                let mut gg = Matrix::zeros(1, e);
                for r in 0..xhat.rows() {
                    for ((o, a), b) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += a * b;
                    }
                }
                accumulate(nodes, gain, gg);
            }
            if wants(nodes, bias) {
                let mut gb = Matrix::zeros(1, e);
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(nodes, bias, gb);
            }
        }
        Op::Gelu(x) => {
            if wants(nodes, *x) {
                let xv = &nodes[x.0].value;
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad(v);
                }
                accumulate(nodes, *x, gx);
            }
        }
        Op::MeanRows { x, from, to } => {
            if wants(nodes, *x) {
                let xv = &nodes[x.0].value;
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let f = 1.0 / (to - from) as f64;
                for r in *from..*to {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * f;
                    }
                }
                accumulate(nodes, *x, gx);
            }
        }
        Op::Attention { q, k, v, heads, probs } => attention_backward(nodes, g, *q, *k, *v, *heads, probs),
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            if wants(nodes, *logits) {
                let b = probs.rows();
                let up = g.get(0, 0) / b as f64;
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= up;
                    }
                }
                accumulate(nodes, *logits, gl);
            }
        }
        Op::SumAll(x) => {
            if wants(nodes, *x) {
                let xv = &nodes[x.0].value;
                accumulate(nodes, *x, Matrix::filled(xv.rows(), xv.cols(), g.get(0, 0)));
            }
        }
    }
}

fn attention_backward(nodes: &mut [Node], g: &Matrix, q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: &[f64]) {
    let (want_q, want_k, want_v) = (wants(nodes, q), wants(nodes, k), wants(nodes, v));
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let e = qv.cols();
    let (tq, tk) = (qv.rows(), kv.rows());
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Matrix::zeros(tq, e);
    let mut gk = Matrix::zeros(tk, e);
    let mut gv = Matrix::zeros(tk, e);
    let mut dp = vec![0.0; tk];
    let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let gi = &gd[i * e + off..i * e + off + dh];
            if want_v {
                for (j, &pj) in p.iter().enumerate() {
                    let row = &mut gv.data_mut()[j * e + off..j * e + off + dh];
                    for (o, x) in row.iter_mut().zip(gi) {
                        *o += pj * x;
                    }
                }
            }
            if !(want_q || want_k) {
                continue;
            }
            let mut dot = 0.0;
            for (j, d) in dp.iter_mut().enumerate() {
                let vj = &vd[j * e + off..j * e + off + dh];
                let mut s = 0.0;
                for (a, b) in gi.iter().zip(vj) {
                    s += a * b;
                }
                *d = s;
                dot += s * p[j];
            }
            // dS = P ⊙ (dP − Σ P dP), then fold in the 1/sqrt(dh) scale
            for (j, d) in dp.iter_mut().enumerate() {
                *d = p[j] * (*d - dot) * scale;
            }
            if want_q {
                let row = &mut gq.data_mut()[i * e + off..i * e + off + dh];
                for (j, &ds) in dp.iter().enumerate() {
                    let kj = &kd[j * e + off..j * e + off + dh];
                    for (o, x) in row.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                }
            }
            if want_k {
                let qi = &qd[i * e + off..i * e + off + dh];
                for (j, &ds) in dp.iter().enumerate() {
                    let row = &mut gk.data_mut()[j * e + off..j * e + off + dh];
                    for (o, x) in row.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    if want_q {
        accumulate(nodes, q, gq);
    }
    if want_k {
        accumulate(nodes, k, gk);
    }
    if want_v {
        accumulate(nodes, v, gv);
    }
}

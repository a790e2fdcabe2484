//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates exact
//! gradients for every node. The op set is just what the models here need:
//! dense products, elementwise nonlinearities, mask-aware softmax / max /
//! sum reductions, embedding gathers, and the clamped cross-entropy losses.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::linear::PROB_CLAMP;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    /// `(n, m) + (1, m)` row broadcast.
    AddRow(NodeId, NodeId),
    /// Elementwise product of two same-shape nodes.
    Mul(NodeId, NodeId),
    /// Elementwise product with a constant matrix (dropout masks).
    MulConst(NodeId, Arc<Array2<f64>>),
    Scale(NodeId, f64),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · b^T`
    MatMulT(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Row-wise softmax over columns where `mask` is true; masked columns are
    /// exactly zero.
    MaskedSoftmaxRows(NodeId, Arc<Vec<bool>>),
    /// Column-wise max over rows where `mask` is true; `argmax` fixed at
    /// forward time, lowest row index on ties.
    MaskedMaxCols(NodeId, Arc<Vec<bool>>, Vec<usize>),
    /// Sum of the rows where `mask` is true, producing `(1, m)`.
    MaskedSumRows(NodeId, Arc<Vec<bool>>),
    /// Copy of row `r` as a `(1, m)` node.
    Row(NodeId, usize),
    /// Stack `(1, m)` nodes into an `(n, m)` node.
    ConcatRows(Vec<NodeId>),
    /// Concatenate along columns.
    ConcatCols(Vec<NodeId>),
    /// Row `j` of the output is the sum of the embedding rows listed in
    /// `groups[j]`; an empty group yields a zero row.
    GatherSumRows(NodeId, Arc<Vec<Vec<usize>>>),
    /// Weighted cross-entropy of a `(1, 1)` probability against a fixed
    /// target: `-pw * t * ln p - (1 - t) * ln(1 - p)`, probabilities clamped
    /// inside the logs.
    WeightedXent { p: NodeId, target: f64, pos_weight: f64 },
    /// Mean weighted cross-entropy of an `(n, 1)` probability column against
    /// per-row targets.
    WeightedXentRows { p: NodeId, targets: Arc<Vec<f64>>, pos_weight: f64 },
    /// Mean KL divergence `KL(t || p)` of an `(n, 1)` probability column from
    /// per-row target distributions. Same gradient as `WeightedXentRows` with
    /// unit weight; the value differs by the target entropy.
    KlRows { p: NodeId, targets: Arc<Vec<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients for every node of a tape, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Array2<f64> {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: NodeId, c: Arc<Array2<f64>>) -> NodeId {
        assert_eq!(self.value(a).dim(), c.dim());
        let v = &self.nodes[a.0].value * &*c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[a.0].value * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols());
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(crate::linear::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ncols(), mask.len());
        assert!(mask.iter().any(|&m| m), "softmax over an all-masked row");
        let mut v = Array2::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &m) in mask.iter().enumerate() {
                if m {
                    let e = (row[c] - max).exp();
                    v[[r, c]] = e;
                    z += e;
                }
            }
            for (c, &m) in mask.iter().enumerate() {
                if m {
                    v[[r, c]] /= z;
                }
            }
        }
        self.push(v, Op::MaskedSoftmaxRows(a, mask))
    }

    pub fn masked_max_cols(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), mask.len());
        assert!(mask.iter().any(|&m| m), "max over an all-masked column");
        let mut v = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; x.ncols()];
        for c in 0..x.ncols() {
            for (r, &m) in mask.iter().enumerate() {
                if m && x[[r, c]] > v[[0, c]] {
                    v[[0, c]] = x[[r, c]];
                    argmax[c] = r;
                }
            }
        }
        self.push(v, Op::MaskedMaxCols(a, mask, argmax))
    }

    pub fn masked_sum_rows(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), mask.len());
        let mut v = Array2::zeros((1, x.ncols()));
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..x.ncols() {
                    v[[0, c]] += x[[r, c]];
                }
            }
        }
        self.push(v, Op::MaskedSumRows(a, mask))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .row(r)
            .to_owned()
            .insert_axis(Axis(0));
        self.push(v, Op::Row(a, r))
    }

    pub fn concat_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty());
        let m = self.value(rows[0]).ncols();
        let mut v = Array2::zeros((rows.len(), m));
        for (i, &id) in rows.iter().enumerate() {
            assert_eq!(self.value(id).dim(), (1, m));
            v.row_mut(i).assign(&self.nodes[id.0].value.row(0));
        }
        self.push(v, Op::ConcatRows(rows.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut offset = 0;
        for &p in parts {
            let x = &self.nodes[p.0].value;
            assert_eq!(x.nrows(), n);
            for r in 0..n {
                for c in 0..x.ncols() {
                    v[[r, offset + c]] = x[[r, c]];
                }
            }
            offset += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_sum_rows(&mut self, emb: NodeId, groups: Arc<Vec<Vec<usize>>>) -> NodeId {
        let e = &self.nodes[emb.0].value;
        let mut v = Array2::zeros((groups.len(), e.ncols()));
        for (j, group) in groups.iter().enumerate() {
            for &i in group {
                for c in 0..e.ncols() {
                    v[[j, c]] += e[[i, c]];
                }
            }
        }
        self.push(v, Op::GatherSumRows(emb, groups))
    }

    pub fn weighted_xent(&mut self, p: NodeId, target: f64, pos_weight: f64) -> NodeId {
        let prob = self.scalar(p);
        let cp = clamp(prob);
        let v = -pos_weight * target * cp.ln() - (1.0 - target) * (1.0 - cp).ln();
        self.push(
            Array2::from_elem((1, 1), v),
            Op::WeightedXent { p, target, pos_weight },
        )
    }

    pub fn weighted_xent_rows(
        &mut self,
        p: NodeId,
        targets: Arc<Vec<f64>>,
        pos_weight: f64,
    ) -> NodeId {
        let probs = &self.nodes[p.0].value;
        assert_eq!(probs.dim(), (targets.len(), 1));
        let n = targets.len() as f64;
        let v = probs
            .column(0)
            .iter()
            .zip(targets.iter())
            .map(|(&pi, &t)| {
                let cp = clamp(pi);
                -pos_weight * t * cp.ln() - (1.0 - t) * (1.0 - cp).ln()
            })
            .sum::<f64>()
            / n;
        self.push(
            Array2::from_elem((1, 1), v),
            Op::WeightedXentRows { p, targets, pos_weight },
        )
    }

    pub fn kl_rows(&mut self, p: NodeId, targets: Arc<Vec<f64>>) -> NodeId {
        let probs = &self.nodes[p.0].value;
        assert_eq!(probs.dim(), (targets.len(), 1));
        let n = targets.len() as f64;
        let entropy_term = |t: f64| {
            let mut h = 0.0;
            if t > 0.0 {
                h += t * t.ln();
            }
            if t < 1.0 {
                h += (1.0 - t) * (1.0 - t).ln();
            }
            h
        };
        let v = probs
            .column(0)
            .iter()
            .zip(targets.iter())
            .map(|(&pi, &t)| {
                let cp = clamp(pi);
                -t * cp.ln() - (1.0 - t) * (1.0 - cp).ln() + entropy_term(t)
            })
            .sum::<f64>()
            / n;
        self.push(Array2::from_elem((1, 1), v), Op::KlRows { p, targets })
    }

    /// Reverse pass from `root`, which must be a `(1, 1)` node. Returns a
    /// gradient for every node on the tape.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        assert_eq!(self.value(root).dim(), (1, 1));
        grads[root.0][[0, 0]] = 1.0;

        for i in (0..=root.0).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &g;
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &row_grad;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::MulConst(a, c) => {
                    let ga = &g * &**c;
                    grads[a.0] += &ga;
                }
                Op::Scale(a, s) => {
                    grads[a.0].scaled_add(*s, &g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(y * &(1.0 - y));
                    grads[a.0] += &ga;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(1.0 - &(y * y));
                    grads[a.0] += &ga;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    grads[a.0] += &ga;
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let mut dot = 0.0;
                        for (c, &m) in mask.iter().enumerate() {
                            if m {
                                dot += g[[r, c]] * y[[r, c]];
                            }
                        }
                        for (c, &m) in mask.iter().enumerate() {
                            if m {
                                ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                            }
                        }
                    }
                    grads[a.0] += &ga;
                }
                Op::MaskedMaxCols(a, _mask, argmax) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        ga[[r, c]] += g[[0, c]];
                    }
                    grads[a.0] += &ga;
                }
                Op::MaskedSumRows(a, mask) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..ga.ncols() {
                                ga[[r, c]] = g[[0, c]];
                            }
                        }
                    }
                    grads[a.0] += &ga;
                }
                Op::Row(a, r) => {
                    for c in 0..g.ncols() {
                        grads[a.0][[*r, c]] += g[[0, c]];
                    }
                }
                Op::ConcatRows(rows) => {
                    for (r, &id) in rows.iter().enumerate() {
                        for c in 0..g.ncols() {
                            grads[id.0][[0, c]] += g[[r, c]];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        for r in 0..g.nrows() {
                            for c in 0..w {
                                grads[p.0][[r, c]] += g[[r, offset + c]];
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherSumRows(emb, groups) => {
                    for (j, group) in groups.iter().enumerate() {
                        for &idx in group {
                            for c in 0..g.ncols() {
                                grads[emb.0][[idx, c]] += g[[j, c]];
                            }
                        }
                    }
                }
                Op::WeightedXent { p, target, pos_weight } => {
                    let prob = clamp(self.nodes[p.0].value[[0, 0]]);
                    let d = -pos_weight * target / prob + (1.0 - target) / (1.0 - prob);
                    grads[p.0][[0, 0]] += g[[0, 0]] * d;
                }
                Op::WeightedXentRows { p, targets, pos_weight } => {
                    let n = targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let prob = clamp(self.nodes[p.0].value[[r, 0]]);
                        let d = (-pos_weight * t / prob + (1.0 - t) / (1.0 - prob)) / n;
                        grads[p.0][[r, 0]] += g[[0, 0]] * d;
                    }
                }
                Op::KlRows { p, targets } => {
                    let n = targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let prob = clamp(self.nodes[p.0].value[[r, 0]]);
                        let d = (-t / prob + (1.0 - t) / (1.0 - prob)) / n;
                        grads[p.0][[r, 0]] += g[[0, 0]] * d;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

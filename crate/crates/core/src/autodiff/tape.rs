//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.

use thiserror::Error;

use super::tensor::{unordered_sum, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate fused embedding (zero norm)")]
    ZeroNorm,
    #[error("{0} attention heads do not divide width {1}")]
    Heads(usize, usize),
    #[error("class index {index} out of range for {classes} logits")]
    ClassOutOfRange { index: usize, classes: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Mask(NodeId, Tensor),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    SumRows(NodeId),
    SumAll(NodeId),
    SoftmaxRows(NodeId),
    L2NormalizeRows {
        input: NodeId,
        norms: Vec<f64>,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        weights: Vec<Tensor>,
    },
    CrossEntropy {
        logits: NodeId,
        gold: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Gradient for each parameter slot; slots not reached by the loss get
    /// zeros of the given shape.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for &(slot, node) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                out[slot].add_assign(g);
            }
        }
        out
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
    }
    let mut terms = out.to_vec();
    let total = unordered_sum(&mut terms);
    for o in out.iter_mut() {
        *o /= total;
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Records a trainable leaf bound to parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> NodeId {
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let value = av.matmul(bv);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(AutodiffError::Shape {
                op: "add_row",
                left: av.shape(),
                right: rv.shape(),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.row(0)) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Elementwise product with a fixed mask (inverted dropout).
    pub fn mask(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId, AutodiffError> {
        check_same("mask", self.value(a), &mask)?;
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        Ok(self.push(value, Op::Mask(a, mask)))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    left: (rows, cols),
                    right: pv.shape(),
                });
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Stacks along rows; all parts must have the same column count.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(AutodiffError::Shape {
                    op: "stack",
                    left: (rows, cols),
                    right: pv.shape(),
                });
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::Stack(parts.to_vec())))
    }

    /// Column sums; the forward value is independent of row order.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).sum_rows_unordered();
        self.push(value, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_row(av.row(r), value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > crate::embedding::MIN_NORM) {
                return Err(AutodiffError::ZeroNorm);
            }
            for x in value.row_mut(r) {
                *x /= n;
            }
            norms.push(n);
        }
        Ok(self.push(value, Op::L2NormalizeRows { input: a, norms }))
    }

    /// Row-wise layer normalization with biased variance.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
        let cols = av.cols();
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                left: av.shape(),
                right: gv.shape(),
            });
        }
        let mut normalized = Tensor::zeros(av.rows(), cols);
        let mut value = Tensor::zeros(av.rows(), cols);
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..cols {
                let xhat = (row[c] - mean) * istd;
                normalized.set(r, c, xhat);
                value.set(r, c, xhat * gv.get(0, c) + bv.get(0, c));
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over already projected
    /// queries, keys and values (`n x width` each). Sums over the sequence are
    /// order independent, so permuting the rows of all three inputs permutes
    /// the output rows and nothing else.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        check_same("attention", qv, kv)?;
        check_same("attention", qv, vv)?;
        let (n, width) = qv.shape();
        if heads == 0 || width % heads != 0 {
            return Err(AutodiffError::Heads(heads, width));
        }
        let dh = width / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, width);
        let mut weights = Vec::with_capacity(heads);
        let mut terms = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut scores = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = qv.row(i)[cols.clone()]
                        .iter()
                        .zip(&kv.row(j)[cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    scores.set(i, j, s * inv_sqrt);
                }
            }
            let mut p = Tensor::zeros(n, n);
            for i in 0..n {
                softmax_row(scores.row(i), p.row_mut(i));
            }
            for i in 0..n {
                for c in cols.clone() {
                    for (j, t) in terms.iter_mut().enumerate() {
                        *t = p.get(i, j) * vv.get(j, c);
                    }
                    out.set(i, c, unordered_sum(&mut terms));
                }
            }
            weights.push(p);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// Softmax cross-entropy of a `1 x C` logit row against class `gold`,
    /// via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, gold: usize) -> Result<NodeId, AutodiffError> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: lv.shape(),
                right: (1, lv.cols()),
            });
        }
        if gold >= lv.cols() {
            return Err(AutodiffError::ClassOutOfRange {
                index: gold,
                classes: lv.cols(),
            });
        }
        let row = lv.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = max + total.ln() - row[gold];
        let probs = exps.iter().map(|e| e / total).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
        ))
    }

    /// Propagates d(loss)/d(node) for every node that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut send = |target: NodeId, contribution: Tensor| match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            };
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.matmul(&bv.transpose()));
                    send(*b, av.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_rows());
                    send(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(bv, |x, y| x * y));
                    send(*b, g.zip_map(av, |x, y| x * y));
                }
                Op::Scale(a, factor) => send(*a, g.map(|x| x * factor)),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    send(*a, g.zip_map(av, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Mask(a, mask) => send(*a, g.zip_map(mask, |d, m| d * m)),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.value(*p).shape();
                        let mut part = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        send(*p, part);
                    }
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.value(*p).shape();
                        let part = Tensor::from_vec(
                            pr,
                            pc,
                            g.data()[offset * pc..(offset + pr) * pc].to_vec(),
                        );
                        offset += pr;
                        send(*p, part);
                    }
                }
                Op::SumRows(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut da = Tensor::zeros(ar, ac);
                    for r in 0..ar {
                        da.row_mut(r).copy_from_slice(g.row(0));
                    }
                    send(*a, da);
                }
                Op::SumAll(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    send(*a, Tensor::from_vec(ar, ac, vec![g.get(0, 0); ar * ac]));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    send(*a, da);
                }
                Op::L2NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, u)| d * u).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norms[r]);
                        }
                    }
                    send(*input, da);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (n, m) = normalized.shape();
                    let mut dgain = Tensor::zeros(1, m);
                    let mut dx = Tensor::zeros(n, m);
                    for r in 0..n {
                        let dxhat: Vec<f64> =
                            (0..m).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(normalized.row(r))
                            .map(|(d, x)| d * x)
                            .sum::<f64>()
                            / m as f64;
                        for c in 0..m {
                            let xhat = normalized.get(r, c);
                            dgain.data_mut()[c] += g.get(r, c) * xhat;
                            dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat * mean_dx));
                        }
                    }
                    send(*bias, g.sum_rows());
                    send(*gain, dgain);
                    send(*input, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, width) = qv.shape();
                    let dh = width / heads;
                    let inv_sqrt = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(n, width);
                    let mut dk = Tensor::zeros(n, width);
                    let mut dv = Tensor::zeros(n, width);
                    for (h, p) in weights.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        // dP[i][j] = dO_i . V_j over this head's columns
                        let mut dp = Tensor::zeros(n, n);
                        for i in 0..n {
                            for j in 0..n {
                                let s: f64 = cols.clone().map(|c| g.get(i, c) * vv.get(j, c)).sum();
                                dp.set(i, j, s);
                            }
                        }
                        for j in 0..n {
                            for c in cols.clone() {
                                let s: f64 = (0..n).map(|i| p.get(i, j) * g.get(i, c)).sum();
                                dv.set(j, c, dv.get(j, c) + s);
                            }
                        }
                        let mut ds = Tensor::zeros(n, n);
                        for i in 0..n {
                            let dot: f64 = (0..n).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                            for j in 0..n {
                                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot) * inv_sqrt);
                            }
                        }
                        for i in 0..n {
                            for c in cols.clone() {
                                let sq: f64 = (0..n).map(|j| ds.get(i, j) * kv.get(j, c)).sum();
                                let sk: f64 = (0..n).map(|j| ds.get(j, i) * qv.get(j, c)).sum();
                                dq.set(i, c, dq.get(i, c) + sq);
                                dk.set(i, c, dk.get(i, c) + sk);
                            }
                        }
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    gold,
                    probs,
                } => {
                    let scale = g.get(0, 0);
                    let d: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(c, p)| scale * (p - if c == *gold { 1.0 } else { 0.0 }))
                        .collect();
                    send(*logits, Tensor::row_vector(d));
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

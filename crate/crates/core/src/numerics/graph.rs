//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in evaluation order. Values are
//! computed eagerly when a node is added; [`Graph::backward`] then walks the
//! tape in reverse and applies each node's backward rule. Parameters are
//! borrowed into the graph rather than copied, so one set of frozen weights
//! can be shared by any number of graphs on different threads.

use std::borrow::Cow;
use std::cell::Cell;

use super::kernels::{self, gemm, MatMut, MatRef};
use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used to name ops in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Detach,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Sum,
    Slice,
    Concat,
    SelectRows,
    Embedding,
    LayerNorm,
    Gelu,
    CausalAttention,
    LogSoftmaxGather,
    Sigmoid,
    LogSigmoid,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        let kind = match name {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "add_row" => Self::AddRow,
            "scale" => Self::Scale,
            "sum" => Self::Sum,
            "slice" => Self::Slice,
            "concat" => Self::Concat,
            "select_rows" => Self::SelectRows,
            "embedding" => Self::Embedding,
            "layer_norm" => Self::LayerNorm,
            "gelu" => Self::Gelu,
            "attention" => Self::CausalAttention,
            "log_softmax_gather" => Self::LogSoftmaxGather,
            "sigmoid" => Self::Sigmoid,
            "log_sigmoid" => Self::LogSigmoid,
            _ => return None,
        };
        Some(kind)
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of one op kind on the current thread.
///
/// Only meant for exercising gradient-check harnesses: the upstream gradient
/// of every node of `kind` is scaled by 1.1 before its rule is applied.
/// Pass `None` to restore correct behaviour.
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

fn active_fault() -> Option<OpKind> {
    BACKWARD_FAULT.with(|f| f.get())
}

enum Op {
    Leaf,
    Detach,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: f64 },
    Sum { x: NodeId },
    Slice { x: NodeId, start: usize },
    Concat { parts: Vec<NodeId> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Embedding { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: NodeId },
    CausalAttention { qkv: NodeId, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    LogSoftmaxGather { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Sigmoid { x: NodeId },
    LogSigmoid { x: NodeId },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Detach => OpKind::Detach,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
            Op::LogSoftmaxGather { .. } => OpKind::LogSoftmaxGather,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::LogSigmoid { .. } => OpKind::LogSigmoid,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// The tape. Nodes are appended in evaluation order and never removed.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` when no gradient
    /// reached the node (it is constant, detached, or unused).
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materialises zeros for unreached nodes.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Borrows `tensor` as a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn param(&mut self, tensor: &'a Tensor) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(Cow::Borrowed(tensor), Op::Leaf, rg)
    }

    /// Borrows `tensor` as a leaf with an explicit trainability flag.
    pub fn leaf(&mut self, tensor: &'a Tensor, requires_grad: bool) -> NodeId {
        self.push(Cow::Borrowed(tensor), Op::Leaf, requires_grad)
    }

    /// Owned leaf; trainable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(Cow::Owned(tensor), Op::Leaf, rg)
    }

    /// Owned leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Same value as `x`, but no gradient flows back through this node.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.as_ref().clone().with_requires_grad(false);
        self.push(Cow::Owned(value), Op::Detach, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(av.data(), m, k),
            MatRef::new(bv.data(), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.elementwise2("add", a, b, |x, y| x + y)?;
        Ok(self.derived(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.elementwise2("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.elementwise2("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-N bias to every row of an M×N matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (m, n) = xv.dims2()?;
        if bv.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Scale { x, factor }, &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Contiguous window of the flattened tensor, as a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(NumericsError::Index {
                op: "slice",
                index: start + len,
                bound: xv.len(),
            });
        }
        let value = Tensor::vector(xv.data()[start..start + len].to_vec());
        Ok(self.derived(value, Op::Slice { x, start }, &[x]))
    }

    /// Flattens and concatenates every part into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        self.derived(
            Tensor::vector(data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumericsError::Index {
                    op: "select_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.derived(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Looks up rows of a V×D table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.derived(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = xv.dims2()?;
        if gv.len() != n || bv.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(
            value,
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

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| kernels::gelu(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Gelu { x }, &[x])
    }

    /// Multi-head causal self-attention over `batch` sequences of `seq`
    /// positions each.
    ///
    /// `qkv` is `(batch·seq) × 3d` with queries, keys and values in that
    /// column order; the result is `(batch·seq) × d`. Position `i` attends
    /// to positions `0..=i` of its own sequence only.
    pub fn causal_attention(
        &mut self,
        qkv: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, NumericsError> {
        let qv = self.value(qkv);
        let (rows, width) = qv.dims2()?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_attention",
                left: qv.shape().to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = qv.data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq * seq];
        for b in 0..batch {
            let base = b * seq * width;
            for h in 0..heads {
                let q = MatRef::strided(data, base + h * dh, seq, dh, width);
                let k = MatRef::strided(data, base + d + h * dh, seq, dh, width);
                let v = MatRef::strided(data, base + 2 * d + h * dh, seq, dh, width);
                gemm(scale, q, k.t(), 0.0, MatMut::new(&mut scores, seq, seq));
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let row = &scores[i * seq..i * seq + i + 1];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (row[j] - max).exp();
                        p[i * seq + j] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        p[i * seq + j] /= z;
                    }
                }
                gemm(
                    1.0,
                    MatRef::new(p, seq, seq),
                    v,
                    0.0,
                    MatMut::strided(&mut out, b * seq * d + h * dh, seq, dh, d),
                );
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.derived(
            value,
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Row-wise log-softmax of a T×V matrix evaluated at one target per row.
    pub fn log_softmax_gather(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NumericsError> {
        let lv = self.value(logits);
        let (t, v) = lv.dims2()?;
        if targets.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "log_softmax_gather",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut out = Vec::with_capacity(t);
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(NumericsError::Index {
                    op: "log_softmax_gather",
                    index: target,
                    bound: v,
                });
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let prow = &mut probs[r * v..(r + 1) * v];
            kernels::log_softmax_row(row, prow);
            out.push(prow[target]);
            for p in prow.iter_mut() {
                *p = p.exp();
            }
        }
        Ok(self.derived(
            Tensor::vector(out),
            Op::LogSoftmaxGather {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| kernels::sigmoid(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Sigmoid { x }, &[x])
    }

    /// `ln σ(x)` elementwise.
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| kernels::log_sigmoid(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::LogSigmoid { x }, &[x])
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.all_finite() {
            return Err(NumericsError::NonFinite { what: "loss".into() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let fault = active_fault();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.1);
            }
            self.apply_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn apply_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("checked in forward");
                let n = bv.dims2().expect("checked in forward").1;
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    gemm(
                        1.0,
                        MatRef::new(g, m, n),
                        MatRef::new(bv.data(), k, n).t(),
                        1.0,
                        MatMut::new(ga, m, k),
                    );
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    gemm(
                        1.0,
                        MatRef::new(av.data(), m, k).t(),
                        MatRef::new(g, m, n),
                        1.0,
                        MatMut::new(gb, k, n),
                    );
                }
            }
            Op::Add { a, b } => {
                for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(p) {
                        let gp = accumulate(grads, p, g.len());
                        gp.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, *bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += factor * v);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let gx = accumulate(grads, *x, n);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let gx = accumulate(grads, *x, n);
                    gx[*start..*start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        let gp = accumulate(grads, *p, n);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let n = xv.dims2().expect("checked in forward").1;
                    let gx = accumulate(grads, *x, xv.len());
                    for (i, &r) in rows.iter().enumerate() {
                        gx[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.dims2().expect("checked in forward").1;
                    let gt = accumulate(grads, *table, tv.len());
                    for (i, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let m = inv_std.len();
                if self.wants(*gain) {
                    let gg = accumulate(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, m * n);
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let dh = g[r * n + c] * gv[c];
                            dxhat[c] = dh;
                            sum_d += dh;
                            sum_dx += dh * xhat[r * n + c];
                        }
                        let is = inv_std[r];
                        for c in 0..n {
                            gx[r * n + c] += is / nf * (nf * dxhat[c] - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = accumulate(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if !self.wants(*qkv) {
                    return;
                }
                let qv = self.value(*qkv);
                let data = qv.data();
                let width = qv.shape()[1];
                let d = width / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let gq = accumulate(grads, *qkv, qv.len());
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    let base = b * seq * width;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let gout = MatRef::strided(g, b * seq * d + h * dh, seq, dh, d);
                        let v = MatRef::strided(data, base + 2 * d + h * dh, seq, dh, width);
                        // dV = Pᵀ·dOut
                        gemm(
                            1.0,
                            MatRef::new(p, seq, seq).t(),
                            gout,
                            1.0,
                            MatMut::strided(gq, base + 2 * d + h * dh, seq, dh, width),
                        );
                        // dP = dOut·Vᵀ, then softmax backward in place.
                        gemm(1.0, gout, v.t(), 0.0, MatMut::new(&mut dp, seq, seq));
                        for i in 0..seq {
                            let mut dot = 0.0;
                            for j in 0..=i {
                                dot += p[i * seq + j] * dp[i * seq + j];
                            }
                            for j in 0..=i {
                                dp[i * seq + j] = p[i * seq + j] * (dp[i * seq + j] - dot);
                            }
                            for j in i + 1..seq {
                                dp[i * seq + j] = 0.0;
                            }
                        }
                        let q = MatRef::strided(data, base + h * dh, seq, dh, width);
                        let k = MatRef::strided(data, base + d + h * dh, seq, dh, width);
                        gemm(
                            scale,
                            MatRef::new(&dp, seq, seq),
                            k,
                            1.0,
                            MatMut::strided(gq, base + h * dh, seq, dh, width),
                        );
                        gemm(
                            scale,
                            MatRef::new(&dp, seq, seq).t(),
                            q,
                            1.0,
                            MatMut::strided(gq, base + d + h * dh, seq, dh, width),
                        );
                    }
                }
            }
            Op::LogSoftmaxGather {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let v = probs.len() / targets.len().max(1);
                    let gl = accumulate(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o -= gr * p;
                        }
                        row[t] += gr;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let s = node.value.data();
                    let gx = accumulate(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * s[i] * (1.0 - s[i]);
                    }
                }
            }
            Op::LogSigmoid { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = accumulate(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::sigmoid(-xv[i]);
                    }
                }
            }
        }
    }
}

//! Tape of operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so insertion order is a topological
//! order. Backward walks the tape in reverse insertion order and accumulates
//! into each input in that fixed order, which keeps gradients bit-reproducible.

use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvSpec};
use super::Tensor2D;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar objective with an analytic gradient, evaluated as a graph node.
pub trait Objective: Send + Sync {
    /// Returns the scalar value and its gradient with respect to `input`.
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)>;

    fn name(&self) -> &str;
}

#[derive(Clone)]
enum Op {
    Leaf { trainable: bool },
    Conv1d { input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec },
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    MatMul { lhs: NodeId, rhs: NodeId, transpose_rhs: bool },
    Relu(NodeId),
    Sigmoid(NodeId),
    MeanRows { input: NodeId, start: usize, end: usize },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, end: usize },
    NormalizeRows { input: NodeId, eps: f64 },
    Objective { input: NodeId, objective: Arc<dyn Objective> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf { trainable: true } => "param",
            Op::Leaf { trainable: false } => "constant",
            Op::Conv1d { .. } => "conv1d",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MeanRows { .. } => "mean_rows",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Objective { objective, .. } => objective.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor2D,
    /// Local gradient cached by objective nodes.
    local: Option<Tensor2D>,
    /// Gradient of trainable leaves after the last backward pass.
    grad: Option<Tensor2D>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    /// Gradient of a trainable leaf from the most recent backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2D> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).map(NodeId).filter(|&id| self.is_trainable(id)).collect()
    }

    /// Replaces the value of a leaf. Call [`Graph::forward`] afterwards to refresh dependents.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor2D) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::Contract(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "leaf {} is {:?}, replacement is {:?}",
                id.0,
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, id: NodeId) -> &mut [f64] {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf { .. }));
        self.nodes[id.0].value.data_mut()
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (value, local) = self.compute(&op)?;
        self.nodes.push(Node { op, value, local, grad: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf { trainable: false }, value, local: None, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2D) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf { trainable: true }, value, local: None, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.push(Op::Conv1d { input, weight, bias, spec })
    }

    /// `input · weight + bias` with `bias` broadcast over rows.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Affine { input, weight, bias })
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { lhs, rhs, transpose_rhs: false })
    }

    /// `lhs · rhsᵀ`.
    pub fn matmul_t(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { lhs, rhs, transpose_rhs: true })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    /// Mean of rows `start..end`, as a `1 x cols` row.
    pub fn mean_rows(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::MeanRows { input, start, end })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { input, start, end })
    }

    /// Scales each row by `1 / (‖row‖ + eps)`.
    pub fn normalize_rows(&mut self, input: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::NormalizeRows { input, eps })
    }

    pub fn objective(&mut self, input: NodeId, objective: Arc<dyn Objective>) -> Result<NodeId> {
        self.push(Op::Objective { input, objective })
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, local) = self.compute(&op)?;
            let node = &mut self.nodes[i];
            node.value = value;
            node.local = local;
        }
        Ok(())
    }

    fn compute(&self, op: &Op) -> Result<(Tensor2D, Option<Tensor2D>)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are never recomputed"),
            Op::Conv1d { input, weight, bias, spec } => kernels::conv1d(v(input), v(weight), v(bias), *spec)?,
            Op::Affine { input, weight, bias } => {
                kernels::conv1d(v(input), v(weight), v(bias), ConvSpec::new(1, 1, 0)).or_else(|e| match e {
                    // an empty batch is valid for affine maps
                    Error::DegenerateLength(_) => Ok(Tensor2D::zeros(0, v(weight).cols())),
                    e => Err(e),
                })?
            }
            Op::MatMul { lhs, rhs, transpose_rhs } => kernels::matmul(v(lhs), v(rhs), *transpose_rhs)?,
            Op::Relu(x) => map(v(x), |a| a.max(0.0)),
            Op::Sigmoid(x) => map(v(x), kernels::sigmoid),
            Op::MeanRows { input, start, end } => {
                let x = v(input);
                if start >= end || *end > x.rows() {
                    return Err(Error::Contract(format!(
                        "mean over rows {start}..{end} of a {}-row tensor",
                        x.rows()
                    )));
                }
                let mut out = Tensor2D::zeros(1, x.cols());
                for r in *start..*end {
                    out.data_mut().iter_mut().zip(x.row(r)).for_each(|(a, b)| *a += b);
                }
                let n = (end - start) as f64;
                out.data_mut().iter_mut().for_each(|a| *a /= n);
                out
            }
            Op::Add(a, b) => zip(v(a), v(b), |x, y| x + y)?,
            Op::Mul(a, b) => zip(v(a), v(b), |x, y| x * y)?,
            Op::Scale(x, f) => map(v(x), |a| a * f),
            Op::Sum(x) => Tensor2D::scalar(v(x).data().iter().sum()),
            Op::Mean(x) => {
                let x = v(x);
                if x.is_empty() {
                    return Err(Error::Contract("mean of an empty tensor".into()));
                }
                Tensor2D::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            Op::ConcatRows(parts) => {
                let cols = parts.first().map(|p| v(p).cols()).unwrap_or(0);
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = v(p);
                    if t.cols() != cols {
                        return Err(Error::Dimension(format!("concat of {} and {} columns", cols, t.cols())));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor2D::from_vec(rows, cols, data)?
            }
            Op::SliceCols { input, start, end } => {
                let x = v(input);
                if start >= end || *end > x.cols() {
                    return Err(Error::Dimension(format!("columns {start}..{end} of {} columns", x.cols())));
                }
                let mut out = Tensor2D::zeros(x.rows(), end - start);
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(&x.row(r)[*start..*end]);
                }
                out
            }
            Op::NormalizeRows { input, eps } => v(input).normalized_rows(*eps),
            Op::Objective { input, objective } => {
                let (value, grad) = objective.evaluate(v(input))?;
                if grad.shape() != v(input).shape() {
                    return Err(Error::Dimension(format!(
                        "objective {} returned a {:?} gradient for a {:?} input",
                        objective.name(),
                        grad.shape(),
                        v(input).shape()
                    )));
                }
                return Ok((Tensor2D::scalar(value), Some(grad)));
            }
        };
        Ok((out, None))
    }

    /// Reverse pass from a scalar node. Leaf gradients are overwritten.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        self.backward_impl(loss, false)
    }

    /// Reverse pass that adds into the gradients left by earlier passes.
    pub fn backward_accumulate(&mut self, loss: NodeId) -> Result<Gradients> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&mut self, loss: NodeId, accumulate: bool) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!("backward from a non-scalar {:?} node", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::Conv1d { input, weight, bias, spec } => {
                    let (gi, gw, gb) =
                        kernels::conv1d_backward(self.value(*input), self.value(*weight), &g, *spec);
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::Affine { input, weight, bias } => {
                    let (gi, gw, gb) = kernels::conv1d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        ConvSpec::new(1, 1, 0),
                    );
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::MatMul { lhs, rhs, transpose_rhs } => {
                    let a = self.value(*lhs);
                    let b = self.value(*rhs);
                    if *transpose_rhs {
                        acc(&mut grads, *lhs, kernels::matmul(&g, b, false)?);
                        acc(&mut grads, *rhs, kernels::matmul(&g.transpose(), a, false)?);
                    } else {
                        acc(&mut grads, *lhs, kernels::matmul(&g, b, true)?);
                        acc(&mut grads, *rhs, kernels::matmul(&a.transpose(), &g, false)?);
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let gx = zip(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?;
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = zip(&g, y, |gv, yv| gv * yv * (1.0 - yv))?;
                    acc(&mut grads, *x, gx);
                }
                Op::MeanRows { input, start, end } => {
                    let x = self.value(*input);
                    let mut gx = Tensor2D::zeros(x.rows(), x.cols());
                    let n = (end - start) as f64;
                    for r in *start..*end {
                        gx.row_mut(r).iter_mut().zip(g.data()).for_each(|(a, b)| *a = b / n);
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y)?;
                    let gb = zip(&g, self.value(*a), |x, y| x * y)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, map(&g, |v| v * f)),
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, Tensor2D::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, Tensor2D::filled(r, c, g.data()[0] / (r * c) as f64));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        acc(&mut grads, *p, Tensor2D::from_vec(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::SliceCols { input, start, end } => {
                    let (r, c) = self.value(*input).shape();
                    let mut gx = Tensor2D::zeros(r, c);
                    for row in 0..r {
                        gx.row_mut(row)[*start..*end].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::NormalizeRows { input, eps } => {
                    let x = self.value(*input);
                    let mut gx = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let n = super::l2_norm(xr);
                        let s = n + eps;
                        let proj = if n > 0.0 { super::dot(gr, xr) / (s * s * n) } else { 0.0 };
                        for ((o, xv), gv) in gx.row_mut(r).iter_mut().zip(xr).zip(gr) {
                            *o = gv / s - xv * proj;
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::Objective { input, .. } => {
                    let local = node.local.as_ref().expect("objective nodes cache their gradient");
                    let scale = g.data()[0];
                    acc(&mut grads, *input, map(local, |v| v * scale));
                }
            }
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf { trainable: true }) {
                continue;
            }
            let node = &mut self.nodes[i];
            let g = g.unwrap_or_else(|| Tensor2D::zeros(node.value.rows(), node.value.cols()));
            let merged = match (accumulate, node.grad.take()) {
                (true, Some(mut prev)) => {
                    prev.add_assign(&g);
                    prev
                }
                _ => g,
            };
            node.grad = Some(merged.clone());
            out.entries.push((NodeId(i), merged));
        }
        // leaves created after the loss node get no gradient from this pass
        if !accumulate {
            for node in &mut self.nodes[loss.0 + 1..] {
                if matches!(node.op, Op::Leaf { trainable: true }) {
                    node.grad = None;
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of trainable leaves, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(NodeId, Tensor2D)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2D> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor2D)> {
        self.entries.iter().map(|(n, g)| (*n, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn acc(grads: &mut [Option<Tensor2D>], id: NodeId, g: Tensor2D) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(x: &Tensor2D, f: impl Fn(f64) -> f64) -> Tensor2D {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor2D::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

fn zip(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "elementwise op on {:?} and {:?} (no broadcasting)",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2D::from_vec(a.rows(), a.cols(), data)
}

//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order.
//! Backward walks the tape once in reverse index order, so gradient
//! accumulation order (and therefore every bit of the result) depends only on
//! the sequence of recorded ops.

mod conv;
mod elementwise;
mod flops;
mod gemm;
mod linalg;
mod norm;
mod scan;
mod shape;

use alloc::vec;
use alloc::vec::Vec;

pub use elementwise::{gelu, sigmoid, softplus, Unary};
pub use flops::{FlopCounter, FlopKind, Scope};
pub use norm::BatchStats;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) enum Op {
    Leaf,
    Binary(elementwise::BinaryKind, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Linear(linalg::LinearOp),
    Matmul(Var, Var),
    Conv2d(conv::Conv2dOp),
    ConvTranspose2d(conv::ConvTranspose2dOp),
    DepthwiseNhwc(conv::DepthwiseOp),
    LayerNorm(norm::LayerNormOp),
    BatchNorm(norm::BatchNormOp),
    Affine(norm::AffineOp),
    Reshape(Var),
    Permute(shape::PermuteOp),
    Concat(shape::ConcatOp),
    Slice(shape::SliceOp),
    Gather(shape::GatherOp),
    Bilinear(shape::BilinearOp),
    SelectiveScan(scan::ScanOp),
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
    flops: FlopCounter,
    scope: Scope,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision, check_finite: true, flops: FlopCounter::default(), scope: Scope::Unscoped }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// NaN/Inf detection after every op. On by default.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = self.round(value);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when the leaf never received one.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Sets the scope that subsequent op FLOPs are attributed to; returns the previous one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        core::mem::replace(&mut self.scope, scope)
    }

    fn round(&self, mut value: Tensor) -> Tensor {
        if self.precision == Precision::Single {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, kind: FlopKind, flops: u64) -> Result<Var> {
        let value = self.round(value);
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.flops.add(self.scope, kind, flops);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::AddBias(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Unary(_, x) | Op::Sum(x) | Op::Mean(x) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::Linear(o) => o.inputs(),
            Op::Conv2d(o) => o.inputs(),
            Op::ConvTranspose2d(o) => o.inputs(),
            Op::DepthwiseNhwc(o) => o.inputs(),
            Op::LayerNorm(o) => o.inputs(),
            Op::BatchNorm(o) => o.inputs(),
            Op::Affine(o) => o.inputs(),
            Op::Permute(o) => vec![o.x],
            Op::Concat(o) => o.parts.clone(),
            Op::Slice(o) => vec![o.x],
            Op::Gather(o) => vec![o.x],
            Op::Bilinear(o) => vec![o.x],
            Op::SelectiveScan(o) => o.inputs(),
        }
    }
}

/// Gradient buffer of `v`, created on first use; `None` when `v` needs no gradient.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let s = &mut grads[v.0];
    if s.is_none() {
        *s = Some(vec![0.0; node.value.numel()]);
    }
    s.as_deref_mut()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, local: &[f64]) {
    if let Some(acc) = slot(grads, nodes, v) {
        acc.iter_mut().zip(local).for_each(|(a, b)| *a += b);
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => elementwise::binary_backward(nodes, *kind, *a, *b, g, grads),
        Op::AddBias(x, b) => elementwise::add_bias_backward(nodes, *x, *b, g, grads),
        Op::Scale(x, c) => {
            if let Some(acc) = slot(grads, nodes, *x) {
                acc.iter_mut().zip(g).for_each(|(a, gi)| *a += c * gi);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, g),
        Op::Unary(kind, x) => elementwise::unary_backward(nodes, *kind, *x, out, g, grads),
        Op::Sum(x) => {
            if let Some(acc) = slot(grads, nodes, *x) {
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(acc) = slot(grads, nodes, *x) {
                let s = g[0] / acc.len() as f64;
                acc.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::Linear(o) => o.backward(nodes, g, grads),
        Op::Matmul(a, b) => linalg::matmul_backward(nodes, *a, *b, g, grads),
        Op::Conv2d(o) => o.backward(nodes, g, grads),
        Op::ConvTranspose2d(o) => o.backward(nodes, g, grads),
        Op::DepthwiseNhwc(o) => o.backward(nodes, g, grads),
        Op::LayerNorm(o) => o.backward(nodes, g, grads),
        Op::BatchNorm(o) => o.backward(nodes, g, grads),
        Op::Affine(o) => o.backward(nodes, g, grads),
        Op::Permute(o) => o.backward(nodes, g, grads),
        Op::Concat(o) => o.backward(nodes, g, grads),
        Op::Slice(o) => o.backward(nodes, g, grads),
        Op::Gather(o) => o.backward(nodes, g, grads),
        Op::Bilinear(o) => o.backward(nodes, g, grads),
        Op::SelectiveScan(o) => o.backward(nodes, g, grads),
    }
}

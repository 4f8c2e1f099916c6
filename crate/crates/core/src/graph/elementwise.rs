use alloc::format;
use alloc::vec::Vec;

use super::{slot, FlopKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unary {
    Exp,
    Log,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::math::exp(-x))
    } else {
        let e = crate::math::exp(x);
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + crate::math::ln_1p(crate::math::exp(-x.abs()))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * crate::math::exp(-0.5 * x * x)
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => crate::math::exp(x),
            Unary::Log => libm::log(x),
            Unary::Gelu => gelu(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
        }
    }

    /// d/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Gelu => gelu_grad(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
        }
    }
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |p, q| p + q,
            BinaryKind::Sub => |p, q| p - q,
            BinaryKind::Mul => |p, q| p * q,
            BinaryKind::Div => |p, q| p / q,
        };
        let data: Vec<f64> = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        let n = data.len() as u64;
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(name, out, Op::Binary(kind, a, b), FlopKind::Elementwise, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap();
        if self.shape(bias) != [last] {
            return Err(Error::shape("add_bias", format!("bias {:?} vs last extent {last}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(last) {
            row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        }
        let n = data.len() as u64;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("add_bias", out, Op::AddBias(x, bias), FlopKind::Elementwise, n)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect::<Vec<_>>();
        let n = data.len() as u64;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("scale", out, Op::Scale(x, c), FlopKind::Elementwise, n)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v + c).collect::<Vec<_>>();
        let n = data.len() as u64;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("add_scalar", out, Op::AddScalar(x), FlopKind::Elementwise, n)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kind.apply(v)).collect::<Vec<_>>();
        let n = data.len() as u64;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(kind.name(), out, Op::Unary(kind, x), FlopKind::NormAct, 5 * n)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// Sum of all elements, in index order.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let n = self.value(x).numel() as u64;
        self.push("sum", Tensor::scalar(s), Op::Sum(x), FlopKind::Elementwise, n)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum();
        self.push("mean", Tensor::scalar(s / n as f64), Op::Mean(x), FlopKind::Elementwise, n as u64)
    }
}

pub(super) fn binary_backward(
    nodes: &[Node],
    kind: BinaryKind,
    a: Var,
    b: Var,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    match kind {
        BinaryKind::Add => {
            super::accumulate(grads, nodes, a, g);
            super::accumulate(grads, nodes, b, g);
        }
        BinaryKind::Sub => {
            super::accumulate(grads, nodes, a, g);
            if let Some(acc) = slot(grads, nodes, b) {
                acc.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi);
            }
        }
        BinaryKind::Mul => {
            if let Some(acc) = slot(grads, nodes, a) {
                for ((s, gi), q) in acc.iter_mut().zip(g).zip(bv) {
                    *s += gi * q;
                }
            }
            if let Some(acc) = slot(grads, nodes, b) {
                for ((s, gi), p) in acc.iter_mut().zip(g).zip(av) {
                    *s += gi * p;
                }
            }
        }
        BinaryKind::Div => {
            if let Some(acc) = slot(grads, nodes, a) {
                for ((s, gi), q) in acc.iter_mut().zip(g).zip(bv) {
                    *s += gi / q;
                }
            }
            if let Some(acc) = slot(grads, nodes, b) {
                for (((s, gi), p), q) in acc.iter_mut().zip(g).zip(av).zip(bv) {
                    *s -= gi * p / (q * q);
                }
            }
        }
    }
}

pub(super) fn add_bias_backward(nodes: &[Node], x: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    super::accumulate(grads, nodes, x, g);
    if let Some(acc) = slot(grads, nodes, b) {
        let last = acc.len();
        for row in g.chunks_exact(last) {
            acc.iter_mut().zip(row).for_each(|(s, gi)| *s += gi);
        }
    }
}

pub(super) fn unary_backward(
    nodes: &[Node],
    kind: Unary,
    x: Var,
    out: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let xv = nodes[x.0].value.data();
    if let Some(acc) = slot(grads, nodes, x) {
        for (((s, gi), &xi), &yi) in acc.iter_mut().zip(g).zip(xv).zip(out.data()) {
            *s += gi * kind.derivative(xi, yi);
        }
    }
}

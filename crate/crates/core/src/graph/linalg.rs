use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_acc, Mat};
use super::{slot, FlopKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct LinearOp {
    x: Var,
    weight: Var,
    bias: Option<Var>,
}

impl LinearOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.weight];
        v.extend(self.bias);
        v
    }

    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let x = nodes[self.x.0].value.data();
        let w = nodes[self.weight.0].value.data();
        let (out_f, in_f) = {
            let s = nodes[self.weight.0].value.shape();
            (s[0], s[1])
        };
        let rows = x.len() / in_f;
        let gm = Mat::new(g, rows, out_f);
        if let Some(gx) = slot(grads, nodes, self.x) {
            gemm_acc(gm, Mat::new(w, out_f, in_f), gx);
        }
        if let Some(gw) = slot(grads, nodes, self.weight) {
            gemm_acc(gm.t(), Mat::new(x, rows, in_f), gw);
        }
        if let Some(b) = self.bias {
            if let Some(gb) = slot(grads, nodes, b) {
                for g_row in g.chunks_exact(out_f) {
                    gb.iter_mut().zip(g_row).for_each(|(s, gi)| *s += gi);
                }
            }
        }
    }
}

impl Graph {
    /// `y = x W^T + b` along the last axis; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight);
        if ws.len() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {ws:?}")));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if *xs.last().unwrap() != in_f {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::shape("linear", format!("bias {:?} vs out {out_f}", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let rows = xd.len() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm_acc(Mat::new(xd, rows, in_f), Mat::new(wd, out_f, in_f).t(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for y_row in out.chunks_exact_mut(out_f) {
                y_row.iter_mut().zip(bd).for_each(|(y, bi)| *y += bi);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let flops = 2 * (rows * in_f * out_f) as u64;
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear(LinearOp { x, weight, bias }),
            FlopKind::Linear,
            flops,
        )
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        gemm_acc(Mat::new(ad, m, k), Mat::new(bd, k, n), &mut out);
        let flops = 2 * (m * k * n) as u64;
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), FlopKind::Matmul, flops)
    }
}

pub(super) fn matmul_backward(nodes: &[Node], a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
    let n = nodes[b.0].value.shape()[1];
    let ad = nodes[a.0].value.data();
    let bd = nodes[b.0].value.data();
    let gm = Mat::new(g, m, n);
    if let Some(ga) = slot(grads, nodes, a) {
        gemm_acc(gm, Mat::new(bd, k, n).t(), ga);
    }
    if let Some(gb) = slot(grads, nodes, b) {
        gemm_acc(Mat::new(ad, m, k).t(), gm, gb);
    }
}

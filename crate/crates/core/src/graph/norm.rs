use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{slot, FlopKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct LayerNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    /// Normalized input, row-major like `x`.
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNormOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let gamma = nodes[self.gamma.0].value.data();
        let c = gamma.len();
        if let Some(gx) = slot(grads, nodes, self.x) {
            let mut gxhat = vec![0.0; c];
            for (((gx_row, g_row), xh_row), &rstd) in
                gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(self.xhat.chunks_exact(c)).zip(&self.rstd)
            {
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for k in 0..c {
                    gxhat[k] = g_row[k] * gamma[k];
                    mean_g += gxhat[k];
                    mean_gx += gxhat[k] * xh_row[k];
                }
                mean_g /= c as f64;
                mean_gx /= c as f64;
                for k in 0..c {
                    gx_row[k] += rstd * (gxhat[k] - mean_g - xh_row[k] * mean_gx);
                }
            }
        }
        if let Some(gg) = slot(grads, nodes, self.gamma) {
            for (g_row, xh_row) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for k in 0..c {
                    gg[k] += g_row[k] * xh_row[k];
                }
            }
        }
        if let Some(gb) = slot(grads, nodes, self.beta) {
            for g_row in g.chunks_exact(c) {
                gb.iter_mut().zip(g_row).for_each(|(s, gv)| *s += gv);
            }
        }
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

pub(crate) struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl BatchNormOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    // channel-major index arithmetic reads better than zipped iterators here
    #[allow(clippy::needless_range_loop)]
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let s = nodes[self.x.0].value.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let gamma = nodes[self.gamma.0].value.data();
        let count = (n * hw) as f64;
        // per-channel sums of g and g*xhat
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    sum_g[ch] += g[k];
                    sum_gx[ch] += g[k] * self.xhat[k];
                }
            }
        }
        if let Some(gx) = slot(grads, nodes, self.x) {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let scale = gamma[ch] * self.rstd[ch];
                    let mg = sum_g[ch] / count;
                    let mgx = sum_gx[ch] / count;
                    for k in off..off + hw {
                        gx[k] += scale * (g[k] - mg - self.xhat[k] * mgx);
                    }
                }
            }
        }
        if let Some(gg) = slot(grads, nodes, self.gamma) {
            gg.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v);
        }
        if let Some(gb) = slot(grads, nodes, self.beta) {
            gb.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v);
        }
    }
}

/// Fixed per-channel `scale * x + shift` on NCHW data (inference batch norm).
pub(crate) struct AffineOp {
    x: Var,
    gamma: Var,
    beta: Var,
    rstd: Vec<f64>,
    mean: Vec<f64>,
}

impl AffineOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    // channel-major index arithmetic reads better than zipped iterators here
    #[allow(clippy::needless_range_loop)]
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let s = nodes[self.x.0].value.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = nodes[self.x.0].value.data();
        let gamma = nodes[self.gamma.0].value.data();
        if let Some(gx) = slot(grads, nodes, self.x) {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let sc = gamma[ch] * self.rstd[ch];
                    for k in off..off + hw {
                        gx[k] += sc * g[k];
                    }
                }
            }
        }
        if let Some(gg) = slot(grads, nodes, self.gamma) {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for k in off..off + hw {
                        gg[ch] += g[k] * (x[k] - self.mean[ch]) * self.rstd[ch];
                    }
                }
            }
        }
        if let Some(gb) = slot(grads, nodes, self.beta) {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    gb[ch] += g[off..off + hw].iter().sum::<f64>();
                }
            }
        }
    }
}

impl Graph {
    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} vs {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / c;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for k in 0..c {
                let xh = (row[k] - mean) * rs;
                xhat[r * c + k] = xh;
                out[r * c + k] = xh * gd[k] + bd[k];
            }
        }
        let n = out.len() as u64;
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm(LayerNormOp { x, gamma, beta, xhat, rstd }),
            FlopKind::NormAct,
            5 * n,
        )
    }

    /// Training-mode batch normalization of `[N, C, H, W]` over batch and space.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected NCHW, got {s:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine vs {c} channels")));
        }
        let count = n * hw;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xd[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += xd[(b * c + ch) * hw..][..hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v / count as f64 + eps)).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (xd[k] - mean[ch]) * rstd[ch];
                    xhat[k] = xh;
                    out[k] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let unbiased = if count > 1 { var.iter().map(|v| v / (count - 1) as f64).collect() } else { var.clone() };
        let stats = BatchStats { mean, var: unbiased };
        let nn = out.len() as u64;
        let v = self.push(
            "batch_norm",
            Tensor::from_parts(s, out),
            Op::BatchNorm(BatchNormOp { x, gamma, beta, xhat, rstd }),
            FlopKind::NormAct,
            5 * nn,
        )?;
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("parameters vs {c} channels")));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    out[k] = (xd[k] - running_mean[ch]) * rstd[ch] * gd[ch] + bd[ch];
                }
            }
        }
        let nn = out.len() as u64;
        self.push(
            "batch_norm",
            Tensor::from_parts(s, out),
            Op::Affine(AffineOp { x, gamma, beta, rstd, mean: running_mean.to_vec() }),
            FlopKind::NormAct,
            5 * nn,
        )
    }
}

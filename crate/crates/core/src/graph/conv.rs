use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_acc, Mat};
use super::{slot, FlopKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range of output positions `o` for which `o * stride + k - pad` falls inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let (k, pad, len) = (k as isize, pad as isize, len as isize);
    let s = stride as isize;
    // smallest o with o*s + k - pad >= 0
    let lo = if pad - k <= 0 { 0 } else { (pad - k + s - 1) / s };
    // largest o with o*s + k - pad <= len - 1
    let hi_num = len - 1 + pad - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

#[derive(Clone, Copy)]
pub(crate) struct Conv2dGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

pub(crate) struct Conv2dOp {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Conv2dGeom,
}

impl Conv2dOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.weight];
        v.extend(self.bias);
        v
    }

    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let geo = &self.geom;
        let Conv2dGeom { n, c, h, w, f, kh, kw, oh, ow, groups, .. } = *geo;
        let (cpg, fpg) = (c / groups, f / groups);
        let kk = cpg * kh * kw;
        let x = nodes[self.x.0].value.data();
        let wt = nodes[self.weight.0].value.data();
        let direct = geo.is_pointwise();
        let mut cols = if direct { Vec::new() } else { vec![0.0; kk * oh * ow] };
        let mut gcols = vec![0.0; kk * oh * ow];
        let want_x = slot(grads, nodes, self.x).is_some();
        let want_w = slot(grads, nodes, self.weight).is_some();
        for b in 0..n {
            for grp in 0..groups {
                let x_grp = &x[(b * c + grp * cpg) * h * w..][..cpg * h * w];
                let g_grp = Mat::new(&g[(b * f + grp * fpg) * oh * ow..], fpg, oh * ow);
                let w_grp = Mat::new(&wt[grp * fpg * kk..], fpg, kk);
                if want_w {
                    let cm = if direct {
                        Mat::new(x_grp, kk, oh * ow)
                    } else {
                        im2col(x_grp, geo, &mut cols);
                        Mat::new(&cols, kk, oh * ow)
                    };
                    let gw = slot(grads, nodes, self.weight).unwrap();
                    gemm_acc(g_grp, cm.t(), &mut gw[grp * fpg * kk..][..fpg * kk]);
                }
                if want_x {
                    let gx = slot(grads, nodes, self.x).unwrap();
                    let gx_grp = &mut gx[(b * c + grp * cpg) * h * w..][..cpg * h * w];
                    if direct {
                        gemm_acc(w_grp.t(), g_grp, gx_grp);
                    } else {
                        gcols.fill(0.0);
                        gemm_acc(w_grp.t(), g_grp, &mut gcols);
                        col2im(&gcols, geo, gx_grp);
                    }
                }
            }
        }
        if let Some(bias) = self.bias {
            if let Some(gb) = slot(grads, nodes, bias) {
                for b in 0..n {
                    for (fo, gbf) in gb.iter_mut().enumerate() {
                        *gbf += g[(b * f + fo) * oh * ow..][..oh * ow].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

impl Conv2dGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `C/groups` input planes into `[C/groups * kh * kw, oh * ow]` columns.
fn im2col(x: &[f64], geo: &Conv2dGeom, cols: &mut [f64]) {
    let Conv2dGeom { h, w, kh, kw, oh, ow, stride, pad, .. } = *geo;
    let cpg = x.len() / (h * w);
    cols.fill(0.0);
    for ci in 0..cpg {
        let plane = &x[ci * h * w..][..h * w];
        for ki in 0..kh {
            let (r0, r1) = valid_range(oh, h, stride, ki, pad);
            for kj in 0..kw {
                let (q0, q1) = valid_range(ow, w, stride, kj, pad);
                let row = &mut cols[((ci * kh + ki) * kw + kj) * oh * ow..][..oh * ow];
                for r in r0..r1 {
                    let x_row = &plane[(r * stride + ki - pad) * w..][..w];
                    let o_row = &mut row[r * ow..][..ow];
                    if stride == 1 {
                        let off = q0 + kj - pad;
                        o_row[q0..q1].copy_from_slice(&x_row[off..off + (q1 - q0)]);
                    } else {
                        for q in q0..q1 {
                            o_row[q] = x_row[q * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto the input planes.
fn col2im(cols: &[f64], geo: &Conv2dGeom, x: &mut [f64]) {
    let Conv2dGeom { h, w, kh, kw, oh, ow, stride, pad, .. } = *geo;
    let cpg = x.len() / (h * w);
    for ci in 0..cpg {
        let plane = &mut x[ci * h * w..][..h * w];
        for ki in 0..kh {
            let (r0, r1) = valid_range(oh, h, stride, ki, pad);
            for kj in 0..kw {
                let (q0, q1) = valid_range(ow, w, stride, kj, pad);
                let row = &cols[((ci * kh + ki) * kw + kj) * oh * ow..][..oh * ow];
                for r in r0..r1 {
                    let x_row = &mut plane[(r * stride + ki - pad) * w..][..w];
                    let c_row = &row[r * ow..][..ow];
                    for q in q0..q1 {
                        x_row[q * stride + kj - pad] += c_row[q];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvTranspose2dOp {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
}

impl ConvTranspose2dOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.weight];
        v.extend(self.bias);
        v
    }

    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = nodes[self.x.0].value.shape();
        let ws = nodes[self.weight.0].value.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, k) = (ws[1], ws[2]);
        let s = self.stride;
        let (oh, ow) = (s * (h - 1) + k, s * (w - 1) + k);
        let x = nodes[self.x.0].value.data();
        let wt = nodes[self.weight.0].value.data();
        if let Some(gx) = slot(grads, nodes, self.x) {
            for b in 0..n {
                for ci in 0..c {
                    let gx_plane = &mut gx[(b * c + ci) * h * w..][..h * w];
                    for fo in 0..f {
                        let g_plane = &g[(b * f + fo) * oh * ow..][..oh * ow];
                        for ki in 0..k {
                            for kj in 0..k {
                                let wv = wt[((ci * f + fo) * k + ki) * k + kj];
                                for i in 0..h {
                                    for j in 0..w {
                                        gx_plane[i * w + j] += wv * g_plane[(i * s + ki) * ow + j * s + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gw) = slot(grads, nodes, self.weight) {
            for b in 0..n {
                for ci in 0..c {
                    let x_plane = &x[(b * c + ci) * h * w..][..h * w];
                    for fo in 0..f {
                        let g_plane = &g[(b * f + fo) * oh * ow..][..oh * ow];
                        for ki in 0..k {
                            for kj in 0..k {
                                let mut acc = 0.0;
                                for i in 0..h {
                                    for j in 0..w {
                                        acc += x_plane[i * w + j] * g_plane[(i * s + ki) * ow + j * s + kj];
                                    }
                                }
                                gw[((ci * f + fo) * k + ki) * k + kj] += acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = self.bias {
            if let Some(gb) = slot(grads, nodes, bias) {
                for b in 0..n {
                    for (fo, gbf) in gb.iter_mut().enumerate() {
                        *gbf += g[(b * f + fo) * oh * ow..][..oh * ow].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

/// Depthwise stride-1 "same" convolution on channels-last input.
pub(crate) struct DepthwiseOp {
    x: Var,
    weight: Var,
    bias: Option<Var>,
}

impl DepthwiseOp {
    pub(super) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.weight];
        v.extend(self.bias);
        v
    }

    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = nodes[self.x.0].value.shape();
        let ws = nodes[self.weight.0].value.shape();
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[1], ws[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let x = nodes[self.x.0].value.data();
        let wt = transpose_kernel(nodes[self.weight.0].value.data(), c, kh * kw);
        if let Some(gx) = slot(grads, nodes, self.x) {
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let g_px = &g[((b * h + i) * w + j) * c..][..c];
                        for ki in 0..kh {
                            let Some(ih) = (i + ki).checked_sub(ph).filter(|&v| v < h) else {
                                continue;
                            };
                            for kj in 0..kw {
                                let Some(iw) = (j + kj).checked_sub(pw).filter(|&v| v < w) else {
                                    continue;
                                };
                                let gx_px = &mut gx[((b * h + ih) * w + iw) * c..][..c];
                                let w_tap = &wt[(ki * kw + kj) * c..][..c];
                                for ((s, gv), wv) in gx_px.iter_mut().zip(g_px).zip(w_tap) {
                                    *s += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gw) = slot(grads, nodes, self.weight) {
            let mut gw_t = vec![0.0; kh * kw * c];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let g_px = &g[((b * h + i) * w + j) * c..][..c];
                        for ki in 0..kh {
                            let Some(ih) = (i + ki).checked_sub(ph).filter(|&v| v < h) else {
                                continue;
                            };
                            for kj in 0..kw {
                                let Some(iw) = (j + kj).checked_sub(pw).filter(|&v| v < w) else {
                                    continue;
                                };
                                let x_px = &x[((b * h + ih) * w + iw) * c..][..c];
                                let gw_tap = &mut gw_t[(ki * kw + kj) * c..][..c];
                                for ((s, gv), xv) in gw_tap.iter_mut().zip(g_px).zip(x_px) {
                                    *s += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
            for ch in 0..c {
                for t in 0..kh * kw {
                    gw[ch * kh * kw + t] += gw_t[t * c + ch];
                }
            }
        }
        if let Some(bias) = self.bias {
            if let Some(gb) = slot(grads, nodes, bias) {
                for g_px in g.chunks_exact(c) {
                    gb.iter_mut().zip(g_px).for_each(|(s, gv)| *s += gv);
                }
            }
        }
    }
}

/// `[c, taps]` -> `[taps, c]`.
fn transpose_kernel(w: &[f64], c: usize, taps: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for ch in 0..c {
        for t in 0..taps {
            out[t * c + ch] = w[ch * taps + t];
        }
    }
    out
}

impl Graph {
    /// 2-D convolution on `[N, C, H, W]` input with a `[F, C/groups, kh, kw]` kernel.
    ///
    /// Output extent is `floor((H + 2*padding - kh) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?} must be 4-D")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c % groups != 0 || f % groups != 0 || c / groups != cpg {
            return Err(Error::shape(
                "conv2d",
                format!("{c} input channels, {f} filters, kernel {ws:?} with {groups} groups"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs {f} filters", self.shape(b))));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let fpg = f / groups;
        let geom = Conv2dGeom { n, c, h, w, f, kh, kw, oh, ow, stride, pad: padding, groups };
        let kk = cpg * kh * kw;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; n * f * oh * ow];
        let direct = geom.is_pointwise();
        let mut cols = if direct { Vec::new() } else { vec![0.0; kk * oh * ow] };
        for b in 0..n {
            for grp in 0..groups {
                let x_grp = &xd[(b * c + grp * cpg) * h * w..][..cpg * h * w];
                let cm = if direct {
                    Mat::new(x_grp, kk, oh * ow)
                } else {
                    im2col(x_grp, &geom, &mut cols);
                    Mat::new(&cols, kk, oh * ow)
                };
                let out_grp = &mut out[(b * f + grp * fpg) * oh * ow..][..fpg * oh * ow];
                gemm_acc(Mat::new(&wd[grp * fpg * kk..], fpg, kk), cm, out_grp);
            }
        }
        if let Some(bias) = bias {
            let bd = self.value(bias).data();
            for (i, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
                let bv = bd[i % f];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let flops = 2 * (n * f * oh * ow * cpg * kh * kw) as u64;
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, f, oh, ow], out),
            Op::Conv2d(Conv2dOp { x, weight, bias, geom }),
            FlopKind::Conv,
            flops,
        )
    }

    /// Transposed convolution without padding; `weight` is `[C_in, F, k, k]`.
    /// Output extent is `stride * (in - 1) + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, k) = (ws[1], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} vs {f}", self.shape(b))));
            }
        }
        let s = stride;
        let (oh, ow) = (s * (h - 1) + k, s * (w - 1) + k);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            for fo in 0..f {
                let plane = &mut out[(b * f + fo) * oh * ow..][..oh * ow];
                for ci in 0..c {
                    let x_plane = &xd[(b * c + ci) * h * w..][..h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = wd[((ci * f + fo) * k + ki) * k + kj];
                            for i in 0..h {
                                for j in 0..w {
                                    plane[(i * s + ki) * ow + j * s + kj] += wv * x_plane[i * w + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bd = self.value(bias).data();
            for (i, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
                let bv = bd[i % f];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let flops = 2 * (n * c * h * w * f * k * k) as u64;
        self.push(
            "conv_transpose2d",
            Tensor::from_parts(vec![n, f, oh, ow], out),
            Op::ConvTranspose2d(ConvTranspose2dOp { x, weight, bias, stride }),
            FlopKind::Conv,
            flops,
        )
    }

    /// Depthwise convolution over `[N, H, W, C]` with a `[C, kh, kw]` kernel (odd
    /// extents), stride 1 and zero padding that preserves the spatial size.
    pub fn depthwise_conv_nhwc(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != xs[3] || ws[1].is_multiple_of(2) || ws[2].is_multiple_of(2) {
            return Err(Error::shape("depthwise_conv", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[1], ws[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = self.value(x).data();
        let wt = transpose_kernel(self.value(weight).data(), c, kh * kw);
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let o_px = &mut out[((b * h + i) * w + j) * c..][..c];
                    for ki in 0..kh {
                        let Some(ih) = (i + ki).checked_sub(ph).filter(|&v| v < h) else {
                            continue;
                        };
                        for kj in 0..kw {
                            let Some(iw) = (j + kj).checked_sub(pw).filter(|&v| v < w) else {
                                continue;
                            };
                            let x_px = &xd[((b * h + ih) * w + iw) * c..][..c];
                            let w_tap = &wt[(ki * kw + kj) * c..][..c];
                            for ((o, xv), wv) in o_px.iter_mut().zip(x_px).zip(w_tap) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [c] {
                return Err(Error::shape("depthwise_conv", format!("bias {:?} vs {c}", self.shape(bias))));
            }
            let bd = self.value(bias).data();
            for px in out.chunks_exact_mut(c) {
                px.iter_mut().zip(bd).for_each(|(o, bv)| *o += bv);
            }
        }
        let flops = 2 * (n * h * w * c * kh * kw) as u64;
        self.push(
            "depthwise_conv",
            Tensor::from_parts(xs, out),
            Op::DepthwiseNhwc(DepthwiseOp { x, weight, bias }),
            FlopKind::Conv,
            flops,
        )
    }
}

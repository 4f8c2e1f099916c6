use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{slot, FlopKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (with `shape`) into `dst` so that output axis `k` is input axis `perm[k]`.
fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], accumulate: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    let mut o = 0;
    while o < dst.len() {
        let mut s = src_off;
        for d in &mut dst[o..o + inner] {
            if accumulate {
                *d += src[s];
            } else {
                *d = src[s];
            }
            s += inner_step;
        }
        o += inner;
        // advance odometer over all but the innermost axis
        let mut k = rank - 1;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            src_off += step[k];
            if idx[k] < out_shape[k] {
                break;
            }
            src_off -= step[k] * idx[k];
            idx[k] = 0;
        }
    }
}

pub(crate) struct PermuteOp {
    pub(super) x: Var,
    perm: Vec<usize>,
}

impl PermuteOp {
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let in_shape = nodes[self.x.0].value.shape();
        let out_shape: Vec<usize> = self.perm.iter().map(|&p| in_shape[p]).collect();
        let mut inv = vec![0; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv[p] = k;
        }
        if let Some(gx) = slot(grads, nodes, self.x) {
            permute_into(g, &out_shape, &inv, gx, true);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct ConcatOp {
    pub(super) parts: Vec<Var>,
    axis: usize,
}

impl ConcatOp {
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let shape0 = nodes[self.parts[0].0].value.shape();
        let (outer, _, inner) = split_axis(shape0, self.axis);
        let total: usize = self.parts.iter().map(|p| nodes[p.0].value.shape()[self.axis]).sum();
        let mut offset = 0;
        for &p in &self.parts {
            let len = nodes[p.0].value.shape()[self.axis];
            if let Some(gp) = slot(grads, nodes, p) {
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..][..len * inner];
                    let dst = &mut gp[o * len * inner..][..len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            offset += len;
        }
    }
}

pub(crate) struct SliceOp {
    pub(super) x: Var,
    axis: usize,
    start: usize,
}

impl SliceOp {
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (outer, full, inner) = split_axis(nodes[self.x.0].value.shape(), self.axis);
        let len = g.len() / (outer * inner);
        if let Some(gx) = slot(grads, nodes, self.x) {
            for o in 0..outer {
                let dst = &mut gx[(o * full + self.start) * inner..][..len * inner];
                let src = &g[o * len * inner..][..len * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }
}

pub(crate) struct GatherOp {
    pub(super) x: Var,
    axis: usize,
    index: Vec<usize>,
}

impl GatherOp {
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (outer, full, inner) = split_axis(nodes[self.x.0].value.shape(), self.axis);
        let len = self.index.len();
        if let Some(gx) = slot(grads, nodes, self.x) {
            for o in 0..outer {
                for (k, &src) in self.index.iter().enumerate() {
                    let dst = &mut gx[(o * full + src) * inner..][..inner];
                    let gs = &g[(o * len + k) * inner..][..inner];
                    dst.iter_mut().zip(gs).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// Source taps for one output coordinate of a half-pixel-centred resize.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap { i0, i1, w1: src - i0 as f64 }
        })
        .collect()
}

pub(crate) struct BilinearOp {
    pub(super) x: Var,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl BilinearOp {
    pub(super) fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let s = nodes[self.x.0].value.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let planes = s[0] * s[1];
        if let Some(gx) = slot(grads, nodes, self.x) {
            for p in 0..planes {
                let gi = &mut gx[p * h * w..][..h * w];
                let go = &g[p * oh * ow..][..oh * ow];
                for (r, tr) in self.rows.iter().enumerate() {
                    for (c, tc) in self.cols.iter().enumerate() {
                        let v = go[r * ow + c];
                        let (a, b) = (1.0 - tr.w1, tr.w1);
                        let (l, rr) = (1.0 - tc.w1, tc.w1);
                        gi[tr.i0 * w + tc.i0] += v * a * l;
                        gi[tr.i0 * w + tc.i1] += v * a * rr;
                        gi[tr.i1 * w + tc.i0] += v * b * l;
                        gi[tr.i1 * w + tc.i1] += v * b * rr;
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), FlopKind::Movement, 0)
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(x).numel()];
        permute_into(self.value(x).data(), &shape, perm, &mut out, false);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, out),
            Op::Permute(PermuteOp { x, perm: perm.to_vec() }),
            FlopKind::Movement,
            0,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", s0.len())));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(k, (a, b))| k != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat(ConcatOp { parts: parts.to_vec(), axis }),
            FlopKind::Movement,
            0,
        )
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice(SliceOp { x, axis, start }), FlopKind::Movement, 0)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if Some(&start) != self.shape(x).get(axis) {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not cover axis {axis}")));
        }
        Ok(out)
    }

    /// Selects entries `index` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index.is_empty() || index.iter().any(|&i| i >= s[axis]) {
            return Err(Error::shape("gather", format!("index out of range for axis {axis} of {s:?}")));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                out.extend_from_slice(&xd[(o * full + i) * inner..][..inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        self.push(
            "gather",
            Tensor::from_parts(shape, out),
            Op::Gather(GatherOp { x, axis, index: index.to_vec() }),
            FlopKind::Movement,
            0,
        )
    }

    /// Bilinear resize of `[N, C, H, W]` with half-pixel centres (no corner alignment).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", format!("{s:?} -> {out_h}x{out_w}")));
        }
        let (h, w) = (s[2], s[3]);
        let rows = taps(h, out_h);
        let cols = taps(w, out_w);
        let xd = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let xi = &xd[p * h * w..][..h * w];
            let o = &mut out[p * out_h * out_w..][..out_h * out_w];
            for (r, tr) in rows.iter().enumerate() {
                for (c, tc) in cols.iter().enumerate() {
                    let top = xi[tr.i0 * w + tc.i0] * (1.0 - tc.w1) + xi[tr.i0 * w + tc.i1] * tc.w1;
                    let bot = xi[tr.i1 * w + tc.i0] * (1.0 - tc.w1) + xi[tr.i1 * w + tc.i1] * tc.w1;
                    o[r * out_w + c] = top * (1.0 - tr.w1) + bot * tr.w1;
                }
            }
        }
        let n = out.len() as u64;
        self.push(
            "bilinear_resize",
            Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out),
            Op::Bilinear(BilinearOp { x, rows, cols }),
            FlopKind::NormAct,
            5 * n,
        )
    }
}

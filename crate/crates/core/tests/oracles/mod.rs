//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code under test except for building inputs.

#![allow(dead_code, clippy::needless_range_loop)]

use mim_core::params::Init;
use mim_core::{Graph, Tensor};

/// Inputs of one selective-scan instance.
#[derive(Debug, Clone)]
pub struct ScanCase {
    pub b: usize,
    pub l: usize,
    pub e: usize,
    pub n: usize,
    pub u: Tensor,
    pub delta: Tensor,
    pub a_log: Tensor,
    pub bm: Tensor,
    pub cm: Tensor,
    pub d: Tensor,
}

impl ScanCase {
    pub fn random(b: usize, l: usize, e: usize, n: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let pos = |t: Tensor| {
            let shape = t.shape().to_vec();
            Tensor::new(shape, t.data().iter().map(|v| 0.05 + 0.5 * v.abs()).collect()).unwrap()
        };
        Self {
            b,
            l,
            e,
            n,
            u: init.uniform(&[b, l, e], 1.0),
            delta: pos(init.uniform(&[b, l, e], 1.0)),
            a_log: init.uniform(&[e, n], 1.0),
            bm: init.uniform(&[b, l, n], 1.0),
            cm: init.uniform(&[b, l, n], 1.0),
            d: init.uniform(&[e], 1.0),
        }
    }

    pub fn inputs(&self) -> [Tensor; 6] {
        [self.u.clone(), self.delta.clone(), self.a_log.clone(), self.bm.clone(), self.cm.clone(), self.d.clone()]
    }

    /// Output of the graph's fused scan.
    pub fn fused(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let v: Vec<_> = self.inputs().into_iter().map(|t| g.constant(t)).collect();
        let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
        g.value(y).data().to_vec()
    }
}

/// Materializes the causal kernel for each channel and applies it as a dense
/// matrix: `y = K u + D u` with
/// `K[t, s] = sum_n C_t[n] exp(A_n sum_{r=s+1..t} delta_r) delta_s B_s[n]`.
/// No recurrence is evaluated.
pub fn dense_scan(k: &ScanCase) -> Vec<f64> {
    let (b_, l_, e_, n_) = (k.b, k.l, k.e, k.n);
    let mut y = vec![0.0; b_ * l_ * e_];
    for b in 0..b_ {
        for e in 0..e_ {
            let delta = |t: usize| k.delta.data()[(b * l_ + t) * e_ + e];
            let u = |t: usize| k.u.data()[(b * l_ + t) * e_ + e];
            let mut kern = vec![0.0; l_ * l_];
            for t in 0..l_ {
                for s in 0..=t {
                    let span: f64 = (s + 1..=t).map(delta).sum();
                    let mut acc = 0.0;
                    for n in 0..n_ {
                        let a = -k.a_log.data()[e * n_ + n].exp();
                        let bv = k.bm.data()[(b * l_ + s) * n_ + n];
                        let cv = k.cm.data()[(b * l_ + t) * n_ + n];
                        acc += cv * (a * span).exp() * delta(s) * bv;
                    }
                    kern[t * l_ + s] = acc;
                }
            }
            for t in 0..l_ {
                let conv: f64 = (0..l_).map(|s| kern[t * l_ + s] * u(s)).sum();
                y[(b * l_ + t) * e_ + e] = conv + k.d.data()[e] * u(t);
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Integer pixel counts of one prediction/truth pair.
pub fn counts(p: &[u8], g: &[u8]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for i in 0..p.len() {
        if p[i] != 0 && g[i] != 0 {
            inter += 1;
        }
        if p[i] != 0 || g[i] != 0 {
            union += 1;
        }
    }
    (inter, union)
}

pub fn iou_ref(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> f64 {
    let (i, u) = preds.iter().zip(gts).map(|(p, g)| counts(p, g)).fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn niou_ref(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> f64 {
    let per: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match counts(p, g) {
            (_, 0) => 1.0,
            (i, u) => i as f64 / u as f64,
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Union-find labelling with 8-connectivity; returns `(pixels, row_sum, col_sum)`
/// per component, ordered by smallest member index.
pub fn components_ref(mask: &[u8], h: usize, w: usize) -> Vec<(i128, i128, i128)> {
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] == 0 {
                continue;
            }
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < h as i64 && nc >= 0 && nc < w as i64 && mask[nr as usize * w + nc as usize] != 0 {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, nr as usize * w + nc as usize));
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut acc: std::collections::BTreeMap<usize, (i128, i128, i128)> = Default::default();
    for i in 0..h * w {
        if mask[i] != 0 {
            let root = find(&mut parent, i);
            let e = acc.entry(root).or_default();
            e.0 += 1;
            e.1 += (i / w) as i128;
            e.2 += (i % w) as i128;
        }
    }
    acc.into_values().collect()
}

/// Target-level counts for one image with integer-exact centroid distances and
/// greedy nearest-first matching under a strict `dist < radius` rule, where
/// `radius` is a whole number of pixels. Returns `(detected, targets, false_pixels)`.
pub fn pd_fa_ref(pred: &[u8], gt: &[u8], h: usize, w: usize, radius: i128) -> (usize, usize, usize) {
    let pc = components_ref(pred, h, w);
    let gc = components_ref(gt, h, w);
    // squared distance between centroids is num / den
    let mut cands = Vec::new();
    for (gi, &(ng, rg, cg)) in gc.iter().enumerate() {
        for (pi, &(np, rp, cp)) in pc.iter().enumerate() {
            let dr = rg * np - rp * ng;
            let dc = cg * np - cp * ng;
            let num = dr * dr + dc * dc;
            let den = (ng * np) * (ng * np);
            if num < radius * radius * den {
                cands.push((num, den, gi, pi));
            }
        }
    }
    cands.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut gt_used = vec![false; gc.len()];
    let mut pred_used = vec![false; pc.len()];
    let mut detected = 0;
    for (_, _, gi, pi) in cands {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            detected += 1;
        }
    }
    let false_pixels = pc.iter().zip(&pred_used).filter(|(_, &u)| !u).map(|(c, _)| c.0 as usize).sum();
    (detected, gc.len(), false_pixels)
}

/// Random sparse mask: a few blobs plus salt noise, so components of every size occur.
pub fn random_mask(rng: &mut impl rand::Rng, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.gen_range(0..4) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (bh, bw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        for r in r0..(r0 + bh).min(h) {
            for c in c0..(c0 + bw).min(w) {
                m[r * w + c] = 1;
            }
        }
    }
    let salt = rng.gen_range(0.0..0.05);
    for v in m.iter_mut() {
        if rng.gen_bool(salt) {
            *v = 1;
        }
    }
    m
}

/// A copy of `m` shifted by `(dr, dc)` with zero fill.
pub fn shifted(m: &[u8], h: usize, w: usize, dr: i64, dc: i64) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (sr, sc) = (r - dr, c - dc);
            if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                out[(r * w as i64 + c) as usize] = m[(sr * w as i64 + sc) as usize];
            }
        }
    }
    out
}

//! Pixel-level (IoU, nIoU) and target-level (Pd, Fa) metrics and ROC curves.
//!
//! Masks are row-major `u8` slices where any nonzero value is foreground.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MATCH_RADIUS: f64 = 3.0;
pub const DEFAULT_ROC_THRESHOLDS: usize = 101;

/// Foreground where `prob >= threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

fn check_pairs(preds: &[&[u8]], gts: &[&[u8]], op: &'static str) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape(op, format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(op, format!("sample {i}: {} vs {} pixels", p.len(), g.len())));
        }
    }
    Ok(())
}

fn overlap(p: &[u8], g: &[u8]) -> (u64, u64) {
    p.iter().zip(g).fold((0, 0), |(i, u), (&a, &b)| {
        let (a, b) = (a != 0, b != 0);
        (i + u64::from(a && b), u + u64::from(a || b))
    })
}

/// A ratio plus the number of samples whose union was empty (scored as 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_unions: usize,
}

/// Dataset-level IoU: summed intersections over summed unions. An all-empty
/// dataset scores 1 and reports every sample in `empty_unions`.
pub fn iou(preds: &[&[u8]], gts: &[&[u8]]) -> Result<Score> {
    check_pairs(preds, gts, "iou")?;
    let (mut inter, mut union, mut empty) = (0u64, 0u64, 0);
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = overlap(p, g);
        inter += i;
        union += u;
        empty += usize::from(u == 0);
    }
    let value = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(Score { value, empty_unions: if union == 0 { empty } else { 0 } })
}

/// Mean per-sample IoU; a sample with an empty union contributes 1.
pub fn niou(preds: &[&[u8]], gts: &[&[u8]]) -> Result<Score> {
    check_pairs(preds, gts, "niou")?;
    if preds.is_empty() {
        return Err(Error::invalid("niou", "no samples"));
    }
    let mut sum = 0.0;
    let mut empty = 0;
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = overlap(p, g);
        if u == 0 {
            empty += 1;
            sum += 1.0;
        } else {
            sum += i as f64 / u as f64;
        }
    }
    Ok(Score { value: sum / preds.len() as f64, empty_unions: empty })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub pixels: usize,
    /// Mean row and column of the member pixels.
    pub row: f64,
    pub col: f64,
    /// Coordinate sums, kept so centroid distances can be compared exactly.
    pub row_sum: u64,
    pub col_sum: u64,
}

impl Component {
    pub fn from_sums(pixels: usize, row_sum: u64, col_sum: u64) -> Self {
        let n = pixels as f64;
        Self { pixels, row: row_sum as f64 / n, col: col_sum as f64 / n, row_sum, col_sum }
    }
}

/// Squared centroid distance as an exact fraction `num / den`.
#[derive(Debug, Clone, Copy)]
struct SqDist {
    num: u128,
    den: u128,
}

impl SqDist {
    fn between(a: &Component, b: &Component) -> Self {
        let (na, nb) = (a.pixels as i128, b.pixels as i128);
        let dr = i128::from(a.row_sum) * nb - i128::from(b.row_sum) * na;
        let dc = i128::from(a.col_sum) * nb - i128::from(b.col_sum) * na;
        let num = (dr * dr).unsigned_abs() + (dc * dc).unsigned_abs();
        let den = ((na * nb) * (na * nb)).unsigned_abs();
        Self { num, den }
    }

    fn approx(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn cmp(self, other: Self) -> core::cmp::Ordering {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(l), Some(r)) => l.cmp(&r),
            _ => self.approx().total_cmp(&other.approx()),
        }
    }

    /// `sqrt(self) < radius`.
    fn within(self, radius: f64) -> bool {
        if radius <= 0.0 {
            return false;
        }
        let r2 = radius * radius;
        if libm::trunc(r2) == r2 && r2 < u64::MAX as f64 {
            if let Some(bound) = (r2 as u128).checked_mul(self.den) {
                return self.num < bound;
            }
        }
        self.approx() < r2
    }
}

/// Connected foreground components in raster order of their first pixel.
pub fn connected_components(mask: &[u8], height: usize, width: usize, conn: Connectivity) -> Result<Vec<Component>> {
    if mask.len() != height * width {
        return Err(Error::shape("connected_components", format!("{} pixels vs {height}x{width}", mask.len())));
    }
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sr, mut sc) = (0usize, 0usize, 0usize);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            n += 1;
            sr += r;
            sc += c;
            for &(dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if mask[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push(Component::from_sums(n, sr as u64, sc as u64));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// A target is detected when a predicted centroid lies strictly closer.
    pub radius: f64,
    pub connectivity: Connectivity,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_MATCH_RADIUS, connectivity: Connectivity::Eight }
    }
}

/// Greedy nearest-first one-to-one matching of predicted to ground-truth
/// components; returns `(gt index, pred index)` pairs. Distances are compared
/// exactly, so the strict radius test has no rounding slack.
pub fn match_components(preds: &[Component], gts: &[Component], radius: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let d = SqDist::between(g, p);
            if d.within(radius) {
                cands.push((d, gi, pi));
            }
        }
    }
    cands.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for (_, gi, pi) in cands {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            pairs.push((gi, pi));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdFa {
    /// Detected targets over all ground-truth targets (1 when there are none).
    pub pd: f64,
    /// Pixels of unmatched predicted components over all pixels.
    pub fa: f64,
    pub detected: usize,
    pub targets: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

pub fn pd_fa(preds: &[&[u8]], gts: &[&[u8]], height: usize, width: usize, cfg: &MatchConfig) -> Result<PdFa> {
    check_pairs(preds, gts, "pd_fa")?;
    let (mut detected, mut targets, mut false_pixels, mut pixels) = (0, 0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let pc = connected_components(p, height, width, cfg.connectivity)?;
        let gc = connected_components(g, height, width, cfg.connectivity)?;
        let pairs = match_components(&pc, &gc, cfg.radius);
        detected += pairs.len();
        targets += gc.len();
        let mut matched = vec![false; pc.len()];
        for &(_, pi) in &pairs {
            matched[pi] = true;
        }
        false_pixels += pc.iter().zip(&matched).filter(|(_, &m)| !m).map(|(c, _)| c.pixels).sum::<usize>();
        pixels += p.len();
    }
    let pd = if targets == 0 { 1.0 } else { detected as f64 / targets as f64 };
    let fa = if pixels == 0 { 0.0 } else { false_pixels as f64 / pixels as f64 };
    Ok(PdFa { pd, fa, detected, targets, false_pixels, pixels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(fpr, tpr)` sorted by fpr, starting at `(0, 0)` and ending at `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Pixel-level ROC over `k` evenly spaced thresholds in `[0, 1]`. A class with
/// no pixels gives a rate of 0.
pub fn roc_curve(probs: &[&[f64]], gts: &[&[u8]], k: usize) -> Result<Roc> {
    if k < 2 {
        return Err(Error::invalid("roc_curve", format!("need at least 2 thresholds, got {k}")));
    }
    if probs.len() != gts.len() || probs.iter().zip(gts).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape("roc_curve", "probability maps and masks differ in shape"));
    }
    let (pos, neg) =
        gts.iter().flat_map(|g| g.iter()).fold((0u64, 0u64), |(p, n), &v| if v != 0 { (p + 1, n) } else { (p, n + 1) });
    let rate = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut points = Vec::with_capacity(k + 2);
    for i in 0..k {
        let t = i as f64 / (k - 1) as f64;
        let (mut tp, mut fp) = (0u64, 0u64);
        for (p, g) in probs.iter().zip(gts) {
            for (&pv, &gv) in p.iter().zip(g.iter()) {
                if pv >= t {
                    if gv != 0 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
        }
        points.push((rate(fp, neg), rate(tp, pos)));
    }
    points.push((0.0, 0.0));
    points.push((1.0, 1.0));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(Roc { points, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub samples: usize,
    pub threshold: f64,
    /// Samples scored 1 by nIoU because prediction and truth were both empty.
    pub empty_unions: usize,
    pub targets: usize,
    pub detected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    pub roc_thresholds: usize,
    pub matching: MatchConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, roc_thresholds: DEFAULT_ROC_THRESHOLDS, matching: MatchConfig::default() }
    }
}

/// All metrics for probability maps against binary masks of one size.
pub fn evaluate(
    probs: &[&[f64]],
    gts: &[&[u8]],
    height: usize,
    width: usize,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if probs.iter().any(|p| p.len() != height * width) {
        return Err(Error::shape("evaluate", format!("probability maps are not {height}x{width}")));
    }
    let bins: Vec<Vec<u8>> = probs.iter().map(|p| binarize(p, opts.threshold)).collect();
    let preds: Vec<&[u8]> = bins.iter().map(Vec::as_slice).collect();
    let iou_s = iou(&preds, gts)?;
    let niou_s = niou(&preds, gts)?;
    let pf = pd_fa(&preds, gts, height, width, &opts.matching)?;
    let roc = roc_curve(probs, gts, opts.roc_thresholds)?;
    Ok(MetricsReport {
        iou: iou_s.value,
        niou: niou_s.value,
        pd: pf.pd,
        fa: pf.fa,
        auc: roc.auc,
        roc: roc.points,
        samples: probs.len(),
        threshold: opts.threshold,
        empty_unions: niou_s.empty_unions,
        targets: pf.targets,
        detected: pf.detected,
    })
}

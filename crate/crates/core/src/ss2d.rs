//! Quad-directional 2D selective scan and the visual Mamba block built on it.
//!
//! Feature maps are channels-last `[B, H, W, C]`. A map is unrolled into four
//! sequences (row-major, column-major and both reversals), each sequence runs
//! through its own S6, and the results are folded back to the grid and summed
//! in direction order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId, ParamKind, ParamStore, Path};
use crate::ssm::{s6_forward, SsmParams, DEFAULT_STATE_DIM};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    RowMajor,
    ColMajor,
    RowMajorReversed,
    ColMajorReversed,
}

impl ScanDirection {
    /// Merge order.
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::ColMajor,
        ScanDirection::RowMajorReversed,
        ScanDirection::ColMajorReversed,
    ];

    /// `order[s]` is the row-major grid position visited at sequence index `s`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let col_major = || (0..h * w).map(move |s| (s % h) * w + s / h);
        match self {
            ScanDirection::RowMajor => (0..h * w).collect(),
            ScanDirection::ColMajor => col_major().collect(),
            ScanDirection::RowMajorReversed => (0..h * w).rev().collect(),
            ScanDirection::ColMajorReversed => {
                let mut v: Vec<usize> = col_major().collect();
                v.reverse();
                v
            }
        }
    }

    /// `inverse[p]` is the sequence index at which grid position `p` is visited.
    pub fn inverse_order(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (s, &p) in order.iter().enumerate() {
            inv[p] = s;
        }
        inv
    }
}

fn grid_dims(ctx: &Ctx<'_>, z: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *ctx.g.shape(z) {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::shape(op, format!("expected [B, H, W, C], got {s:?}"))),
    }
}

/// Unrolls `z: [B, H, W, E]` into a `[B, H*W, E]` sequence in direction `dir`.
pub fn scan_expand(ctx: &mut Ctx<'_>, z: Var, dir: ScanDirection) -> Result<Var> {
    let (b, h, w, e) = grid_dims(ctx, z, "scan_expand")?;
    let flat = ctx.g.reshape(z, &[b, h * w, e])?;
    if dir == ScanDirection::RowMajor {
        return Ok(flat);
    }
    ctx.g.gather(flat, 1, &dir.order(h, w))
}

/// Folds four direction sequences (`[B, H*W, E]`, in [`ScanDirection::ALL`]
/// order) back onto the grid and sums them in that order.
pub fn scan_merge(ctx: &mut Ctx<'_>, seqs: &[Var; 4], h: usize, w: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (dir, &s) in ScanDirection::ALL.iter().zip(seqs) {
        let shape = ctx.g.shape(s).to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::shape("scan_merge", format!("sequence {shape:?} vs grid {h}x{w}")));
        }
        let grid = if *dir == ScanDirection::RowMajor { s } else { ctx.g.gather(s, 1, &dir.inverse_order(h, w))? };
        acc = Some(match acc {
            None => grid,
            Some(a) => ctx.g.add(a, grid)?,
        });
    }
    let acc = acc.unwrap();
    let (b, e) = (ctx.g.shape(acc)[0], ctx.g.shape(acc)[2]);
    ctx.g.reshape(acc, &[b, h, w, e])
}

/// S6 parameters for the four directions (one shared set when sharing is on).
#[derive(Debug, Clone)]
pub struct Ss2dParams {
    pub directions: Vec<SsmParams>,
}

impl Ss2dParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        path: &Path,
        d_inner: usize,
        d_state: usize,
        dt_rank: usize,
        share: bool,
    ) -> Result<Self> {
        let count = if share { 1 } else { 4 };
        let directions = (0..count)
            .map(|k| SsmParams::new(store, init, &path.child(format_args!("dir{k}")), d_inner, d_state, dt_rank))
            .collect::<Result<_>>()?;
        Ok(Self { directions })
    }

    pub fn for_direction(&self, k: usize) -> &SsmParams {
        &self.directions[k % self.directions.len()]
    }
}

/// SS2D with the per-direction sequence operator supplied by the caller.
pub fn ss2d_with<F>(ctx: &mut Ctx<'_>, z: Var, mut per_direction: F) -> Result<Var>
where
    F: FnMut(&mut Ctx<'_>, usize, Var) -> Result<Var>,
{
    let (_, h, w, _) = grid_dims(ctx, z, "ss2d")?;
    let mut outs = [z; 4];
    for (k, dir) in ScanDirection::ALL.iter().enumerate() {
        let seq = scan_expand(ctx, z, *dir)?;
        outs[k] = per_direction(ctx, k, seq)?;
    }
    scan_merge(ctx, &outs, h, w)
}

pub fn ss2d_forward(ctx: &mut Ctx<'_>, z: Var, p: &Ss2dParams) -> Result<Var> {
    ss2d_with(ctx, z, |ctx, k, seq| s6_forward(ctx, seq, p.for_direction(k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VssConfig {
    pub d_model: usize,
    /// Inner width multiplier (`E = expand * d_model`).
    pub expand: usize,
    pub d_state: usize,
    pub share_directions: bool,
}

impl VssConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, expand: 2, d_state: DEFAULT_STATE_DIM, share_directions: false }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// `ceil(d_model / 16)`.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        path: &Path,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight =
            store.add(path.child("weight").as_str(), init.fan_in(&[d_out, d_in], d_in), ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(path.child("bias").as_str(), Tensor::zeros([d_out]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &Path, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(path.child("gamma").as_str(), Tensor::full([dim], 1.0), ParamKind::Trainable)?,
            beta: store.add(path.child("beta").as_str(), Tensor::zeros([dim]), ParamKind::Trainable)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Depthwise 3x3 convolution on channels-last maps.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                path.child("weight").as_str(),
                init.fan_in(&[channels, 3, 3], 9),
                ParamKind::Trainable,
            )?,
            bias: store.add(path.child("bias").as_str(), Tensor::zeros([channels]), ParamKind::Trainable)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.g.depthwise_conv_nhwc(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct VssBlockParams {
    pub cfg: VssConfig,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv: DepthwiseConv,
    pub ss2d: Ss2dParams,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

impl VssBlockParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, cfg: VssConfig) -> Result<Self> {
        let (d, e) = (cfg.d_model, cfg.d_inner());
        Ok(Self {
            cfg,
            in_proj: Linear::new(store, init, &path.child("in_proj"), d, e, true)?,
            gate_proj: Linear::new(store, init, &path.child("gate_proj"), d, e, true)?,
            conv: DepthwiseConv::new(store, init, &path.child("dwconv"), e)?,
            ss2d: Ss2dParams::new(
                store,
                init,
                &path.child("ss2d"),
                e,
                cfg.d_state,
                cfg.dt_rank(),
                cfg.share_directions,
            )?,
            out_norm: LayerNorm::new(store, &path.child("out_norm"), e)?,
            out_proj: Linear::new(store, init, &path.child("out_proj"), e, d, true)?,
        })
    }
}

/// Visual Mamba block on `[B, H, W, d]`:
/// `out_proj(LN(SS2D(SiLU(dwconv(in_proj x)))) * SiLU(gate_proj x))`.
pub fn vss_block(ctx: &mut Ctx<'_>, x: Var, p: &VssBlockParams) -> Result<Var> {
    let (_, _, _, c) = grid_dims(ctx, x, "vss_block")?;
    if c != p.cfg.d_model {
        return Err(Error::shape("vss_block", format!("{c} channels vs d_model {}", p.cfg.d_model)));
    }
    let main = p.in_proj.forward(ctx, x)?;
    let main = p.conv.forward(ctx, main)?;
    let main = ctx.g.silu(main)?;
    let main = ss2d_forward(ctx, main, &p.ss2d)?;
    let main = p.out_norm.forward(ctx, main)?;
    let gate = p.gate_proj.forward(ctx, x)?;
    let gate = ctx.g.silu(gate)?;
    let y = ctx.g.mul(main, gate)?;
    p.out_proj.forward(ctx, y)
}

#[derive(Debug, Clone)]
pub struct ConvFfnParams {
    pub fc1: Linear,
    pub dwconv: DepthwiseConv,
    pub fc2: Linear,
}

pub const FFN_RATIO: usize = 4;

impl ConvFfnParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, d: usize) -> Result<Self> {
        let hidden = FFN_RATIO * d;
        Ok(Self {
            fc1: Linear::new(store, init, &path.child("fc1"), d, hidden, true)?,
            dwconv: DepthwiseConv::new(store, init, &path.child("dwconv"), hidden)?,
            fc2: Linear::new(store, init, &path.child("fc2"), hidden, d, true)?,
        })
    }
}

/// Pointwise expand, depthwise 3x3, GeLU, pointwise project.
pub fn conv_ffn(ctx: &mut Ctx<'_>, x: Var, p: &ConvFfnParams) -> Result<Var> {
    grid_dims(ctx, x, "conv_ffn")?;
    let h = p.fc1.forward(ctx, x)?;
    let h = p.dwconv.forward(ctx, h)?;
    let h = ctx.g.gelu(h)?;
    p.fc2.forward(ctx, h)
}

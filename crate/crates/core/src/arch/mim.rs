//! Nested word/sentence blocks.
//!
//! Words are stored per sentence as `[B*n, k, k, c]` (`k` words per sentence
//! side, `m = k*k`), sentences as the grid `[B, hs, ws, d]`. The word batch
//! axis enumerates `(batch, sentence row, sentence col)` row-major, so both
//! layouts reshape losslessly into each other.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamStore, Path};
use crate::ss2d::{conv_ffn, vss_block, ConvFfnParams, LayerNorm, Linear, VssBlockParams, VssConfig};

#[derive(Debug, Clone, Copy)]
pub struct StageState {
    /// `[B*n, k, k, c]`
    pub words: Var,
    /// `[B, hs, ws, d]`
    pub sentences: Var,
}

/// `[B, hw, ww, c]` word grid to `[B*hs*ws, k, k, c]` per-sentence groups.
pub fn group_words(ctx: &mut Ctx<'_>, grid: Var, k: usize) -> Result<Var> {
    let [b, h, w, c] = *ctx.g.shape(grid) else {
        return Err(Error::shape("group_words", format!("expected [B, h, w, c], got {:?}", ctx.g.shape(grid))));
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape("group_words", format!("{h}x{w} word grid not divisible into {k}x{k} sentences")));
    }
    let (hs, ws) = (h / k, w / k);
    let y = ctx.g.reshape(grid, &[b, hs, k, ws, k, c])?;
    let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    ctx.g.reshape(y, &[b * hs * ws, k, k, c])
}

/// Inverse of [`group_words`] for a sentence grid of `hs x ws`.
pub fn ungroup_words(ctx: &mut Ctx<'_>, words: Var, hs: usize, ws: usize) -> Result<Var> {
    let [bn, k, k2, c] = *ctx.g.shape(words) else {
        return Err(Error::shape("ungroup_words", format!("expected [B*n, k, k, c], got {:?}", ctx.g.shape(words))));
    };
    if k != k2 || hs * ws == 0 || bn % (hs * ws) != 0 {
        return Err(Error::shape("ungroup_words", format!("{:?} vs sentence grid {hs}x{ws}", ctx.g.shape(words))));
    }
    let b = bn / (hs * ws);
    let y = ctx.g.reshape(words, &[b, hs, ws, k, k, c])?;
    let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    ctx.g.reshape(y, &[b, hs * k, ws * k, c])
}

/// `x + vss(LN(x))`, then `+ ffn(LN(.))`, on a channels-last grid.
#[derive(Debug, Clone)]
pub struct ResidualMamba {
    pub norm1: LayerNorm,
    pub vss: VssBlockParams,
    pub norm2: LayerNorm,
    pub ffn: ConvFfnParams,
}

impl ResidualMamba {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, cfg: VssConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm1: LayerNorm::new(store, &path.child("norm1"), d)?,
            vss: VssBlockParams::new(store, init, &path.child("vss"), cfg)?,
            norm2: LayerNorm::new(store, &path.child("norm2"), d)?,
            ffn: ConvFfnParams::new(store, init, &path.child("ffn"), d)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.norm1.forward(ctx, x)?;
        let y = vss_block(ctx, y, &self.vss)?;
        let x = ctx.g.add(x, y)?;
        let y = self.norm2.forward(ctx, x)?;
        let y = conv_ffn(ctx, y, &self.ffn)?;
        ctx.g.add(x, y)
    }
}

/// Word update, applied to every sentence's `k x k` word grid with one shared
/// parameter set.
pub fn inner_update(ctx: &mut Ctx<'_>, words: Var, p: &ResidualMamba) -> Result<Var> {
    p.forward(ctx, words)
}

/// `S + proj(vec(W))` with `vec` flattening each sentence's words row-major.
pub fn inject_words(ctx: &mut Ctx<'_>, sentences: Var, words: Var, proj: &Linear) -> Result<Var> {
    let [b, hs, ws, d] = *ctx.g.shape(sentences) else {
        return Err(Error::shape("inject_words", format!("sentences {:?}", ctx.g.shape(sentences))));
    };
    let wshape = ctx.g.shape(words).to_vec();
    if wshape.len() != 4 || wshape[0] != b * hs * ws {
        return Err(Error::shape("inject_words", format!("words {wshape:?} vs sentences {:?}", [b, hs, ws, d])));
    }
    let mc = wshape[1] * wshape[2] * wshape[3];
    let [out, inp] = *ctx.store().value(proj.weight).shape() else {
        return Err(Error::shape("inject_words", "projection weight must be 2-D"));
    };
    if inp != mc || out != d {
        return Err(Error::shape("inject_words", format!("projection {out}x{inp} vs m*c={mc}, d={d}")));
    }
    let flat = ctx.g.reshape(words, &[b, hs, ws, mc])?;
    let y = proj.forward(ctx, flat)?;
    ctx.g.add(sentences, y)
}

/// Sentence update on the sentence grid.
pub fn outer_update(ctx: &mut Ctx<'_>, sentences: Var, p: &ResidualMamba) -> Result<Var> {
    p.forward(ctx, sentences)
}

#[derive(Debug, Clone)]
pub struct MimBlockParams {
    /// Absent when the inner (word-level) path is disabled.
    pub inner: Option<ResidualMamba>,
    pub inject: Linear,
    pub outer: ResidualMamba,
    pub outer_bypass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct MimBlockConfig {
    pub word_dim: usize,
    pub sentence_dim: usize,
    pub words_per_sentence: usize,
    pub d_state: usize,
    pub inner_enabled: bool,
    pub outer_bypass: bool,
    pub share_directions: bool,
}

impl MimBlockParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, cfg: MimBlockConfig) -> Result<Self> {
        let vss = |d| VssConfig { d_state: cfg.d_state, share_directions: cfg.share_directions, ..VssConfig::new(d) };
        let inner = if cfg.inner_enabled {
            Some(ResidualMamba::new(store, init, &path.child("inner"), vss(cfg.word_dim))?)
        } else {
            None
        };
        Ok(Self {
            inner,
            inject: Linear::new(
                store,
                init,
                &path.child("inject"),
                cfg.words_per_sentence * cfg.word_dim,
                cfg.sentence_dim,
                true,
            )?,
            outer: ResidualMamba::new(store, init, &path.child("outer"), vss(cfg.sentence_dim))?,
            outer_bypass: cfg.outer_bypass,
        })
    }
}

/// One block with a replaceable sentence update; the seam for ordering tests.
pub fn mim_block_with<F>(ctx: &mut Ctx<'_>, state: StageState, p: &MimBlockParams, outer: F) -> Result<StageState>
where
    F: FnOnce(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let words = match &p.inner {
        Some(inner) => inner_update(ctx, state.words, inner)?,
        None => state.words,
    };
    let sentences = inject_words(ctx, state.sentences, words, &p.inject)?;
    let sentences = if p.outer_bypass { sentences } else { outer(ctx, sentences)? };
    Ok(StageState { words, sentences })
}

pub fn mim_block(ctx: &mut Ctx<'_>, state: StageState, p: &MimBlockParams) -> Result<StageState> {
    mim_block_with(ctx, state, p, |ctx, s| outer_update(ctx, s, &p.outer))
}

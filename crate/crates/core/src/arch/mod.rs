//! The full segmentation network: convolutional stem, four-stage nested
//! word/sentence encoder, upsampling adapters, decoder and head.

mod layers;
mod mim;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::params::{Ctx, Init, ParamStore, Path};
use crate::tensor::Tensor;

pub use layers::{
    to_channels_first, to_channels_last, BatchNorm, Conv2d, ConvBnAct, PatchExpand, PatchMerge, ResBlock, BN_EPS,
};
pub use mim::{
    group_words, inject_words, inner_update, mim_block, mim_block_with, outer_update, ungroup_words, MimBlockConfig,
    MimBlockParams, ResidualMamba, StageState,
};

pub const NUM_STAGES: usize = 4;
pub const DECODER_RES_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceInit {
    /// Sentences come from further stride-2 stem convolutions over the words.
    Stem,
    /// Stage-1 sentences start at zero and are filled by word injection.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Stage-1 word embedding dim; doubles every stage.
    pub word_dim: usize,
    /// Stage-1 sentence embedding dim; doubles every stage.
    pub sentence_dim: usize,
    pub blocks_per_stage: [usize; NUM_STAGES],
    /// Pixels per word side.
    pub word_pixels: usize,
    /// Words per sentence side (`m` is its square).
    pub words_per_sentence_side: usize,
    pub sentence_init: SentenceInit,
    pub inner_enabled: bool,
    pub outer_bypass: bool,
    pub share_directions: bool,
    pub d_state: usize,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 3,
            word_dim: 8,
            sentence_dim: 32,
            blocks_per_stage: [2, 2, 2, 2],
            word_pixels: 2,
            words_per_sentence_side: 4,
            sentence_init: SentenceInit::Stem,
            inner_enabled: true,
            outer_bypass: false,
            share_directions: false,
            d_state: crate::ssm::DEFAULT_STATE_DIM,
        }
    }
}

impl MimConfig {
    /// Smallest side length the geometry accepts: the stage-4 sentence grid
    /// must have at least one cell, and never less than 64.
    pub fn granularity(&self) -> usize {
        ((self.word_pixels * self.words_per_sentence_side) << (NUM_STAGES - 1)).max(64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.word_dim == 0 || self.sentence_dim == 0 || self.d_state == 0 {
            return bad("channel counts and d_state must be positive".into());
        }
        for (name, v) in [("word_pixels", self.word_pixels), ("words_per_sentence_side", self.words_per_sentence_side)]
        {
            if !v.is_power_of_two() {
                return bad(format!("{name} must be a power of two, got {v}"));
            }
        }
        if !self.word_dim.is_multiple_of(2) || !self.sentence_dim.is_multiple_of(2) {
            return bad("word_dim and sentence_dim must be even".into());
        }
        let gran = self.granularity();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(gran) || !self.width.is_multiple_of(gran)
        {
            return bad(format!("input {}x{} not divisible by {gran}", self.height, self.width));
        }
        Ok(())
    }

    pub fn words_per_sentence(&self) -> usize {
        self.words_per_sentence_side * self.words_per_sentence_side
    }

    /// Word-grid `(h, w)` at stage `s` (0-based).
    pub fn word_grid(&self, s: usize) -> (usize, usize) {
        let f = self.word_pixels << s;
        (self.height / f, self.width / f)
    }

    /// Sentence-grid `(h, w)` at stage `s` (0-based).
    pub fn sentence_grid(&self, s: usize) -> (usize, usize) {
        let (h, w) = self.word_grid(s);
        (h / self.words_per_sentence_side, w / self.words_per_sentence_side)
    }

    pub fn word_dim_at(&self, s: usize) -> usize {
        self.word_dim << s
    }

    pub fn sentence_dim_at(&self, s: usize) -> usize {
        self.sentence_dim << s
    }

    fn block_config(&self, s: usize) -> MimBlockConfig {
        MimBlockConfig {
            word_dim: self.word_dim_at(s),
            sentence_dim: self.sentence_dim_at(s),
            words_per_sentence: self.words_per_sentence(),
            d_state: self.d_state,
            inner_enabled: self.inner_enabled,
            outer_bypass: self.outer_bypass,
            share_directions: self.share_directions,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub words: Vec<ConvBnAct>,
    /// Empty under [`SentenceInit::Zero`].
    pub sentences: Vec<ConvBnAct>,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    /// Downsampling of the previous stage's grids; absent at stage 1.
    pub word_merge: Option<PatchMerge>,
    pub sentence_merge: Option<PatchMerge>,
    pub blocks: Vec<MimBlockParams>,
}

/// Transposed 2x2 stride-2 conv, BN, GeLU, 3x3 conv, BN, GeLU.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub up: Conv2d,
    pub bn: BatchNorm,
    pub refine: ConvBnAct,
}

impl Upsample {
    fn new(store: &mut ParamStore, init: &mut Init, path: &Path, c: usize) -> Result<Self> {
        Ok(Self {
            // weight layout [C_in, C_out, 2, 2] for the transposed op
            up: Conv2d::new(store, init, &path.child("up"), c, c, 2, 2, false)?,
            bn: BatchNorm::new(store, &path.child("bn"), c)?,
            refine: ConvBnAct::new(store, init, &path.child("refine"), c, c, 3, 1)?,
        })
    }

    /// NCHW in, NCHW out at twice the spatial size.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.up.weight);
        let y = ctx.g.conv_transpose2d(x, w, None, 2)?;
        let y = self.bn.forward(ctx, y)?;
        let y = ctx.g.gelu(y)?;
        self.refine.forward(ctx, y)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub expand: PatchExpand,
    pub fuse: Conv2d,
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct MimModel {
    pub cfg: MimConfig,
    pub stem: Stem,
    pub stages: Vec<StageParams>,
    pub upsample: Vec<Upsample>,
    /// Ordered deepest-first (stride 16, 8, 4 targets).
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

fn log2(v: usize) -> usize {
    v.trailing_zeros() as usize
}

impl MimModel {
    /// Builds the model and its parameter store from a seed.
    pub fn init(cfg: &MimConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let model = Self::build(cfg, &mut store, &mut init)?;
        Ok((model, store))
    }

    pub fn build(cfg: &MimConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.word_dim, cfg.sentence_dim);

        let root = Path::root("stem");
        let mut words = Vec::new();
        let down = log2(cfg.word_pixels);
        let mut c_in = cfg.in_channels;
        for i in 0..down.max(1) {
            let stride = if down == 0 { 1 } else { 2 };
            words.push(ConvBnAct::new(store, init, &root.child(format!("word{i}")), c_in, c, 3, stride)?);
            c_in = c;
        }
        words.push(ConvBnAct::new(store, init, &root.child("word_proj"), c, c, 3, 1)?);
        let mut sentences = Vec::new();
        if cfg.sentence_init == SentenceInit::Stem {
            let down = log2(cfg.words_per_sentence_side);
            let mut c_in = c;
            for i in 0..down.max(1) {
                let stride = if down == 0 { 1 } else { 2 };
                sentences.push(ConvBnAct::new(store, init, &root.child(format!("sentence{i}")), c_in, d, 3, stride)?);
                c_in = d;
            }
        }
        let stem = Stem { words, sentences };

        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let path = Path::root("encoder").child(format!("stage{}", s + 1));
            let (word_merge, sentence_merge) = if s == 0 {
                (None, None)
            } else {
                (
                    Some(PatchMerge::new(store, init, &path.child("word_merge"), cfg.word_dim_at(s - 1))?),
                    Some(PatchMerge::new(store, init, &path.child("sentence_merge"), cfg.sentence_dim_at(s - 1))?),
                )
            };
            let blocks = (0..cfg.blocks_per_stage[s])
                .map(|b| MimBlockParams::new(store, init, &path.child(format!("block{b}")), cfg.block_config(s)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageParams { word_merge, sentence_merge, blocks });
        }

        let upsample = (0..NUM_STAGES)
            .map(|s| Upsample::new(store, init, &Path::root("upsample").child(s + 1), cfg.sentence_dim_at(s)))
            .collect::<Result<Vec<_>>>()?;

        let mut decoder = Vec::new();
        for s in (0..NUM_STAGES - 1).rev() {
            let path = Path::root("decoder").child(format!("stage{}", s + 1));
            let ch = cfg.sentence_dim_at(s);
            decoder.push(DecoderStage {
                expand: PatchExpand::new(store, init, &path.child("expand"), 2 * ch)?,
                fuse: Conv2d::new(store, init, &path.child("fuse"), 2 * ch, ch, 1, 1, true)?,
                blocks: (0..DECODER_RES_BLOCKS)
                    .map(|i| ResBlock::new(store, init, &path.child(format!("res{i}")), ch))
                    .collect::<Result<Vec<_>>>()?,
            });
        }
        let head = Conv2d::new(store, init, &Path::root("head"), d, 1, 1, 1, true)?;

        Ok(Self { cfg: cfg.clone(), stem, stages, upsample, decoder, head })
    }

    fn check_image(&self, g: &Graph, image: Var) -> Result<usize> {
        let s = g.shape(image);
        let cfg = &self.cfg;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
            return Err(Error::shape(
                "model_forward",
                format!("image {s:?} vs [B, {}, {}, {}]", cfg.in_channels, cfg.height, cfg.width),
            ));
        }
        Ok(s[0])
    }

    /// Stage-1 words `[B*n, k, k, C]` and sentences `[B, hs, ws, D]`.
    pub fn stem_forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<StageState> {
        let b = self.check_image(ctx.g, image)?;
        let mut x = image;
        for layer in &self.stem.words {
            x = layer.forward(ctx, x)?;
        }
        let word_grid = x;
        let sentences = if self.stem.sentences.is_empty() {
            let (hs, ws) = self.cfg.sentence_grid(0);
            ctx.g.constant(Tensor::zeros([b, hs, ws, self.cfg.sentence_dim]))
        } else {
            for layer in &self.stem.sentences {
                x = layer.forward(ctx, x)?;
            }
            to_channels_last(ctx, x)?
        };
        let grid = to_channels_last(ctx, word_grid)?;
        let words = group_words(ctx, grid, self.cfg.words_per_sentence_side)?;
        Ok(StageState { words, sentences })
    }

    /// Sentence grids after each stage, channels-last, at strides
    /// `8, 16, 32, 64` under the default geometry.
    pub fn encode(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Vec<Var>> {
        let prev = ctx.g.set_scope(Scope::Stem);
        let result = self.encode_inner(ctx, image);
        ctx.g.set_scope(prev);
        result
    }

    fn encode_inner(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Vec<Var>> {
        let mut state = self.stem_forward(ctx, image)?;
        ctx.g.set_scope(Scope::Encoder);
        let k = self.cfg.words_per_sentence_side;
        let mut outputs = Vec::with_capacity(NUM_STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            if let (Some(wm), Some(sm)) = (&stage.word_merge, &stage.sentence_merge) {
                let (hs, ws) = self.cfg.sentence_grid(s - 1);
                let grid = ungroup_words(ctx, state.words, hs, ws)?;
                let grid = wm.forward(ctx, grid)?;
                state.words = group_words(ctx, grid, k)?;
                state.sentences = sm.forward(ctx, state.sentences)?;
            }
            for block in &stage.blocks {
                state = mim_block(ctx, state, block)?;
            }
            outputs.push(state.sentences);
        }
        Ok(outputs)
    }

    /// Upsamples each stage output to twice its resolution (NCHW).
    pub fn upsample_features(&self, ctx: &mut Ctx<'_>, features: &[Var]) -> Result<Vec<Var>> {
        let prev = ctx.g.set_scope(Scope::Upsample);
        let result = features
            .iter()
            .zip(&self.upsample)
            .map(|(&f, up)| {
                let x = to_channels_first(ctx, f)?;
                up.forward(ctx, x)
            })
            .collect();
        ctx.g.set_scope(prev);
        result
    }

    /// Deepest-first fusion of NCHW features at successive strides into logits
    /// `[B, 1, H, W]`.
    pub fn decode(&self, ctx: &mut Ctx<'_>, features: &[Var]) -> Result<Var> {
        if features.len() != NUM_STAGES {
            return Err(Error::shape("decoder", format!("expected {NUM_STAGES} features, got {}", features.len())));
        }
        let prev = ctx.g.set_scope(Scope::Decoder);
        let result = self.decode_inner(ctx, features);
        ctx.g.set_scope(prev);
        result
    }

    fn decode_inner(&self, ctx: &mut Ctx<'_>, features: &[Var]) -> Result<Var> {
        let mut x = to_channels_last(ctx, features[NUM_STAGES - 1])?;
        let mut x_nchw = features[NUM_STAGES - 1];
        for (stage, &skip) in self.decoder.iter().zip(features[..NUM_STAGES - 1].iter().rev()) {
            let up = stage.expand.forward(ctx, x)?;
            let up = to_channels_first(ctx, up)?;
            if ctx.g.shape(up) != ctx.g.shape(skip) {
                return Err(Error::shape(
                    "decoder",
                    format!("expanded {:?} vs skip {:?}", ctx.g.shape(up), ctx.g.shape(skip)),
                ));
            }
            let y = ctx.g.concat(&[up, skip], 1)?;
            let mut y = stage.fuse.forward(ctx, y)?;
            for block in &stage.blocks {
                y = block.forward(ctx, y)?;
            }
            x_nchw = y;
            x = to_channels_last(ctx, y)?;
        }
        ctx.g.set_scope(Scope::Head);
        let logits = self.head.forward(ctx, x_nchw)?;
        ctx.g.bilinear_resize(logits, self.cfg.height, self.cfg.width)
    }

    /// Raw mask logits `[B, 1, H, W]` for images `[B, in_channels, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let enc = self.encode(ctx, image)?;
        let up = self.upsample_features(ctx, &enc)?;
        self.decode(ctx, &up)
    }
}

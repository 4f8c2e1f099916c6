//! Convolutional building blocks shared by the stem, adapters and decoder.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, Mode, ParamId, ParamKind, ParamStore, Path};
use crate::ss2d::{LayerNorm, Linear};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        path: &Path,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            path.child("weight").as_str(),
            init.fan_in(&[c_out, c_in, kernel, kernel], fan_in),
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.add(path.child("bias").as_str(), Tensor::zeros([c_out]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.g.conv2d(x, w, b, self.stride, self.padding, 1)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, path: &Path, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(path.child("gamma").as_str(), Tensor::full([channels], 1.0), ParamKind::Trainable)?,
            beta: store.add(path.child("beta").as_str(), Tensor::zeros([channels]), ParamKind::Trainable)?,
            running_mean: store.add(
                path.child("running_mean").as_str(),
                Tensor::zeros([channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                path.child("running_var").as_str(),
                Tensor::full([channels], 1.0),
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                ctx.record_running_stats(self.running_mean, self.running_var, &stats);
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.buffer(self.running_mean).data();
                let rv = ctx.buffer(self.running_var).data();
                ctx.g.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
            }
        }
    }
}

/// Convolution, batch norm, GeLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        path: &Path,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, init, &path.child("conv"), c_in, c_out, kernel, stride, false)?,
            bn: BatchNorm::new(store, &path.child("bn"), c_out)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.g.gelu(y)
    }
}

/// Residual convolution block: `x + ConvBnAct(ConvBnAct(x))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub first: ConvBnAct,
    pub second: ConvBnAct,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, channels: usize) -> Result<Self> {
        Ok(Self {
            first: ConvBnAct::new(store, init, &path.child("first"), channels, channels, 3, 1)?,
            second: ConvBnAct::new(store, init, &path.child("second"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        ctx.g.add(x, y)
    }
}

/// 2x2 neighbourhood concatenation, layer norm, linear `4c -> 2c`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, c: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &path.child("norm"), 4 * c)?,
            reduction: Linear::new(store, init, &path.child("reduction"), 4 * c, 2 * c, false)?,
        })
    }

    /// `[B, h, w, c] -> [B, h/2, w/2, 2c]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [b, h, w, c] = *ctx.g.shape(x) else {
            return Err(Error::shape("patch_merge", format!("expected [B, h, w, c], got {:?}", ctx.g.shape(x))));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_merge", format!("odd grid {h}x{w}")));
        }
        let y = ctx.g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
        // neighbourhood order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        let y = ctx.g.permute(y, &[0, 1, 3, 4, 2, 5])?;
        let y = ctx.g.reshape(y, &[b, h / 2, w / 2, 4 * c])?;
        let y = self.norm.forward(ctx, y)?;
        self.reduction.forward(ctx, y)
    }
}

/// Linear `c -> 2c`, pixel shuffle to `[B, 2h, 2w, c/2]`, layer norm.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
}

impl PatchExpand {
    pub fn new(store: &mut ParamStore, init: &mut Init, path: &Path, c: usize) -> Result<Self> {
        if !c.is_multiple_of(2) {
            return Err(Error::Config(format!("patch expand needs an even channel count, got {c}")));
        }
        Ok(Self {
            expand: Linear::new(store, init, &path.child("expand"), c, 2 * c, false)?,
            norm: LayerNorm::new(store, &path.child("norm"), c / 2)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [b, h, w, c] = *ctx.g.shape(x) else {
            return Err(Error::shape("patch_expand", format!("expected [B, h, w, c], got {:?}", ctx.g.shape(x))));
        };
        let y = self.expand.forward(ctx, x)?;
        let y = ctx.g.reshape(y, &[b, h, w, 2, 2, c / 2])?;
        let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = ctx.g.reshape(y, &[b, 2 * h, 2 * w, c / 2])?;
        self.norm.forward(ctx, y)
    }
}

pub fn to_channels_last(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    ctx.g.permute(x, &[0, 2, 3, 1])
}

pub fn to_channels_first(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    ctx.g.permute(x, &[0, 3, 1, 2])
}

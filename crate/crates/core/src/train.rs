//! Dice loss, AdaGrad and the in-memory training loop.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::MimModel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

pub const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dice_eps: f64,
    /// Epochs between checkpoints written by the driver; 0 writes only the last.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.06,
            weight_decay: 0.0004,
            batch_size: 4,
            epochs: 100,
            max_steps: None,
            seed: 0,
            dice_eps: 1.0,
            checkpoint_every: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(alloc::format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.dice_eps >= 0.0) {
            return Err(Error::Config("weight_decay and dice_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` over every
/// element of the batch.
pub fn dice_loss(g: &mut Graph, probs: Var, target: Var, eps: f64) -> Result<Var> {
    let inter = g.mul(probs, target)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, eps)?;
    let sp = g.sum(probs)?;
    let st = g.sum(target)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Plain-slice reference of [`dice_loss`].
pub fn dice_loss_value(probs: &[f64], target: &[f64], eps: f64) -> f64 {
    let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = probs.iter().sum();
    let st: f64 = target.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

/// AdaGrad with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaGrad {
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub step: u64,
    /// Squared-gradient sums, indexed like the parameter store.
    pub accumulators: Vec<Option<Tensor>>,
}

impl AdaGrad {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, eps: ADAGRAD_EPS, step: 0, accumulators: Vec::new() }
    }

    pub fn accumulator(&self, id: ParamId) -> Option<&Tensor> {
        self.accumulators.get(id.index()).and_then(Option::as_ref)
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        if self.accumulators.len() < store.len() {
            self.accumulators.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let param = store.value_mut(*id);
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adagrad",
                    alloc::format!("grad {:?} vs param {:?}", grad.shape(), param.shape()),
                ));
            }
            let acc = self.accumulators[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            for ((p, a), &g) in param.data_mut().iter_mut().zip(acc.data_mut()).zip(grad.data()) {
                let g = g + self.weight_decay * *p;
                *a += g * g;
                *p -= self.lr * g / (libm::sqrt(*a) + self.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Stacks samples `[C, H, W]` into a batch `[B, C, H, W]`.
pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let mut shape = alloc::vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::shape("stack", alloc::format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
}

/// One forward/backward/update on a batch of images `[B, C, H, W]` and masks
/// `[B, 1, H, W]` with values in `{0, 1}`.
pub fn train_step(
    model: &MimModel,
    store: &mut ParamStore,
    opt: &mut AdaGrad,
    images: &Tensor,
    masks: &Tensor,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let (loss, grads, stats) = {
        let mut g = Graph::with_precision(cfg.precision);
        let mut ctx = Ctx::new(&mut g, store, Mode::Train);
        let x = ctx.g.constant(images.clone());
        let logits = model.forward(&mut ctx, x)?;
        if ctx.g.shape(logits) != masks.shape() {
            return Err(Error::shape(
                "train_step",
                alloc::format!("logits {:?} vs masks {:?}", ctx.g.shape(logits), masks.shape()),
            ));
        }
        ctx.g.set_scope(Scope::Loss);
        let probs = ctx.g.sigmoid(logits)?;
        let t = ctx.g.constant(masks.clone());
        let loss = dice_loss(ctx.g, probs, t, cfg.dice_eps)?;
        let value = ctx.g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "dice_loss" });
        }
        ctx.g.backward(loss)?;
        let stats = ctx.take_stat_updates();
        (value, ctx.param_grads(), stats)
    };
    opt.update(store, &grads)?;
    for (id, value) in stats {
        store.set(id, value)?;
    }
    Ok(StepReport { loss })
}

/// Sigmoid probabilities `[B, 1, H, W]` in inference mode.
pub fn predict(model: &MimModel, store: &ParamStore, images: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut g = Graph::with_precision(precision);
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
    let x = ctx.g.constant(images.clone());
    let logits = model.forward(&mut ctx, x)?;
    let probs = ctx.g.sigmoid(logits)?;
    Ok(ctx.g.value(probs).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Seeded, shuffled mini-batch training over in-memory samples. `on_epoch`
/// runs after every epoch with the 1-based epoch number.
pub fn fit<F>(
    model: &MimModel,
    store: &mut ParamStore,
    opt: &mut AdaGrad,
    images: &[Tensor],
    masks: &[Tensor],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<HistoryEntry>>
where
    F: FnMut(usize, &ParamStore, &AdaGrad) -> Result<()>,
{
    cfg.validate()?;
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::invalid("fit", alloc::format!("{} images vs {} masks", images.len(), masks.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    'outer: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let x = stack(&chunk.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let y = stack(&chunk.iter().map(|&i| &masks[i]).collect::<Vec<_>>())?;
            let r = train_step(model, store, opt, &x, &y, cfg)?;
            history.push(HistoryEntry { step, epoch, loss: r.loss });
            step += 1;
        }
        on_epoch(epoch, store, opt)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn dice_closed_forms() {
        let gt = [1.0, 1.0, 0.0, 0.0];
        assert!((dice_loss_value(&[0.5; 4], &gt, 0.0) - 0.5).abs() < 1e-15);
        assert!(dice_loss_value(&gt, &gt, 0.0).abs() < 1e-15);
        assert!(dice_loss_value(&gt, &gt, 1.0).abs() < 1e-15);
        assert!((dice_loss_value(&[0.0; 4], &gt, 1e-9) - 1.0).abs() < 1e-9);

        let mut g = Graph::new();
        let p = g.constant(Tensor::new([4], alloc::vec![0.2, 0.9, 0.4, 0.1]).unwrap());
        let t = g.constant(Tensor::new([4], gt.to_vec()).unwrap());
        let l = dice_loss(&mut g, p, t, 1.0).unwrap();
        let want = dice_loss_value(&[0.2, 0.9, 0.4, 0.1], &gt, 1.0);
        assert!((g.value(l).data()[0] - want).abs() < 1e-15);
    }

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v), ParamKind::Trainable).unwrap();
        (s, id)
    }

    #[test]
    fn adagrad_first_step_and_decay() {
        let (mut s, id) = one_param(0.0);
        let mut opt = AdaGrad::new(0.06, 0.0);
        opt.update(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        assert!((s.value(id).data()[0] + 0.06).abs() < 1e-9);
        let mut prev = 0.06;
        for t in 2..10 {
            let before = s.value(id).data()[0];
            opt.update(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
            let delta = before - s.value(id).data()[0];
            assert!((delta - 0.06 / libm::sqrt(t as f64)).abs() < 1e-9);
            assert!(delta < prev);
            prev = delta;
        }
        assert_eq!(opt.step, 9);
    }

    #[test]
    fn adagrad_no_ops() {
        let (mut s, id) = one_param(1.5);
        let mut opt = AdaGrad::new(0.06, 0.0);
        opt.update(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s.value(id).data()[0], 1.5);
        let mut opt = AdaGrad::new(0.0, 0.0);
        opt.update(&mut s, &[(id, Tensor::scalar(3.0))]).unwrap();
        assert_eq!(s.value(id).data()[0], 1.5);
        // weight decay alone pulls towards zero
        let mut opt = AdaGrad::new(0.06, 0.1);
        opt.update(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert!(s.value(id).data()[0] < 1.5);
        assert!(opt.update(&mut s, &[(id, Tensor::zeros([2]))]).is_err());
    }

    #[test]
    fn stack_checks_shapes() {
        let a = Tensor::zeros([1, 2, 2]);
        let b = Tensor::full([1, 2, 2], 1.0);
        let s = stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(&s.data()[4..], &[1.0; 4]);
        assert!(stack(&[&a, &Tensor::zeros([2])]).is_err());
        assert!(stack(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}

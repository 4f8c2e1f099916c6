//! Finite-difference gradient cases: every differentiable graph op, the VSS
//! block, a stack of MiM blocks and the loss through a toy model. Each case
//! returns its report so callers decide how to fail.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mim_core::arch::{mim_block, MimBlockConfig, MimBlockParams, MimConfig, MimModel, StageState};
use mim_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use mim_core::params::{Ctx, Init, Mode, ParamId, ParamStore, Path};
use mim_core::ss2d::{vss_block, VssBlockParams, VssConfig};
use mim_core::train::dice_loss;
use mim_core::{Graph, Result, Tensor, Var};

pub struct Outcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

pub fn assert_all(outcomes: &[Outcome]) {
    let bad: Vec<_> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| (o.name.as_str(), o.report.failures().cloned().collect::<Vec<_>>()))
        .collect();
    assert!(bad.is_empty(), "{bad:?}");
}

pub fn rand(shape: &[usize], seed: u64) -> Tensor {
    Init::new(seed).uniform(shape, 1.0)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = rand(shape, seed);
    let data = t.data().iter().map(|v| 0.5 + v.abs()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * r)` for a fixed pseudo-random `r`, so every output entry carries a
/// distinct weight.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let r = g.constant(rand(g.shape(y), 999));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(out: &mut Vec<Outcome>, name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, inputs, &GradCheckOptions::default()).unwrap();
    out.push(Outcome { name: name.to_string(), report });
}

/// Every op group.
pub fn all_ops() -> Vec<Outcome> {
    [
        binary_elementwise,
        unary_elementwise,
        dense_products,
        convolutions,
        normalizations,
        data_movement,
        fused_selective_scan,
        dice_loss_gradient,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}

pub fn binary_elementwise() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (a, b) = (rand(&[3, 4], 1), positive(&[3, 4], 2));
    check(
        &mut out,
        "add",
        |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        },
        &[a.clone(), b.clone()],
    );
    check(
        &mut out,
        "sub",
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        },
        &[a.clone(), b.clone()],
    );
    check(
        &mut out,
        "mul",
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        },
        &[a.clone(), b.clone()],
    );
    check(
        &mut out,
        "div",
        |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y)
        },
        &[a.clone(), b],
    );
    check(
        &mut out,
        "add_bias",
        |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y)
        },
        &[a, rand(&[4], 3)],
    );
    out
}

pub fn unary_elementwise() -> Vec<Outcome> {
    let mut out = Vec::new();
    let x = rand(&[2, 5], 4);
    check(
        &mut out,
        "scale",
        |g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "add_scalar",
        |g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "exp",
        |g, v| {
            let y = g.exp(v[0])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "log",
        |g, v| {
            let y = g.log(v[0])?;
            project(g, y)
        },
        &[positive(&[2, 5], 5)],
    );
    check(
        &mut out,
        "gelu",
        |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "silu",
        |g, v| {
            let y = g.silu(v[0])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "softplus",
        |g, v| {
            let y = g.softplus(v[0])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "sigmoid",
        |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "mean",
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        },
        &[x],
    );
    out
}

pub fn dense_products() -> Vec<Outcome> {
    let mut out = Vec::new();
    check(
        &mut out,
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y)
        },
        &[rand(&[2, 3, 4], 6), rand(&[5, 4], 7), rand(&[5], 8)],
    );
    check(
        &mut out,
        "matmul",
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        },
        &[rand(&[3, 4], 9), rand(&[4, 2], 10)],
    );
    out
}

pub fn convolutions() -> Vec<Outcome> {
    let mut out = Vec::new();
    let cases: [(usize, usize, usize, usize, usize, usize); 5] = [
        // (c, f, k, stride, pad, groups)
        (2, 3, 3, 1, 1, 1),
        (2, 3, 3, 2, 1, 1),
        (4, 4, 3, 1, 1, 2),
        (3, 2, 1, 1, 0, 1),
        (2, 2, 2, 2, 0, 1),
    ];
    for (i, &(c, f, k, s, p, gr)) in cases.iter().enumerate() {
        check(
            &mut out,
            &format!("conv2d case {i}"),
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), s, p, gr)?;
                project(g, y)
            },
            &[rand(&[2, c, 5, 6], 11), rand(&[f, c / gr, k, k], 12), rand(&[f], 13)],
        );
    }
    check(
        &mut out,
        "conv_transpose2d",
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
            project(g, y)
        },
        &[rand(&[2, 3, 3, 2], 14), rand(&[3, 2, 2, 2], 15), rand(&[2], 16)],
    );
    check(
        &mut out,
        "depthwise_conv_nhwc",
        |g, v| {
            let y = g.depthwise_conv_nhwc(v[0], v[1], Some(v[2]))?;
            project(g, y)
        },
        &[rand(&[2, 4, 3, 3], 17), rand(&[3, 3, 3], 18), rand(&[3], 19)],
    );
    out
}

pub fn normalizations() -> Vec<Outcome> {
    let mut out = Vec::new();
    check(
        &mut out,
        "layer_norm",
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y)
        },
        &[rand(&[3, 6], 20), rand(&[6], 21), rand(&[6], 22)],
    );
    check(
        &mut out,
        "batch_norm_train",
        |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y)
        },
        &[rand(&[2, 3, 2, 2], 23), rand(&[3], 24), rand(&[3], 25)],
    );
    check(
        &mut out,
        "batch_norm_eval",
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            project(g, y)
        },
        &[rand(&[2, 3, 2, 2], 26), rand(&[3], 27), rand(&[3], 28)],
    );
    out
}

pub fn data_movement() -> Vec<Outcome> {
    let mut out = Vec::new();
    let x = rand(&[2, 3, 4], 29);
    check(
        &mut out,
        "reshape",
        |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "permute",
        |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "concat",
        |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y)
        },
        &[x.clone(), rand(&[2, 2, 4], 30)],
    );
    check(
        &mut out,
        "slice",
        |g, v| {
            let y = g.slice(v[0], 2, 1, 2)?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "split",
        |g, v| {
            let parts = g.split(v[0], 1, &[1, 2])?;
            let a = project(g, parts[0])?;
            let b = project(g, parts[1])?;
            g.add(a, b)
        },
        std::slice::from_ref(&x),
    );
    check(
        &mut out,
        "gather",
        |g, v| {
            let y = g.gather(v[0], 2, &[3, 0, 0, 2, 1])?;
            project(g, y)
        },
        &[x],
    );
    check(
        &mut out,
        "bilinear_resize",
        |g, v| {
            let y = g.bilinear_resize(v[0], 7, 5)?;
            project(g, y)
        },
        &[rand(&[1, 2, 3, 4], 31)],
    );
    check(
        &mut out,
        "bilinear_downsize",
        |g, v| {
            let y = g.bilinear_resize(v[0], 2, 3)?;
            project(g, y)
        },
        &[rand(&[1, 2, 5, 7], 32)],
    );
    out
}

pub fn fused_selective_scan() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (b, l, e, n) = (2, 5, 3, 4);
    check(
        &mut out,
        "selective_scan",
        |g, v| {
            let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
            project(g, y)
        },
        &[
            rand(&[b, l, e], 33),
            positive(&[b, l, e], 34),
            rand(&[e, n], 35),
            rand(&[b, l, n], 36),
            rand(&[b, l, n], 37),
            rand(&[e], 38),
        ],
    );
    out
}

pub fn dice_loss_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    check(
        &mut out,
        "dice_loss",
        |g, v| {
            let p = g.sigmoid(v[0])?;
            let t = g.constant(Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
            dice_loss(g, p, t, 1.0)
        },
        &[rand(&[2, 3], 39)],
    );
    out
}

/// Checks `loss` with respect to `extra` inputs and the parameters `ids`, which
/// are bound to graph leaves in that order after the extras.
fn check_params<F>(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    extra: Vec<Tensor>,
    opts: &GradCheckOptions,
    loss: F,
) -> Outcome
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let report = grad_check(
        |g, v| {
            let mut ctx = Ctx::new(g, store, Mode::Train);
            for (&id, &var) in ids.iter().zip(&v[n_extra..]) {
                ctx.bind(id, var);
            }
            loss(&mut ctx, &v[..n_extra])
        },
        &inputs,
        opts,
    )
    .unwrap();
    Outcome { name: name.to_string(), report }
}

fn project_ctx(ctx: &mut Ctx<'_>, y: Var) -> Result<Var> {
    project(ctx.g, y)
}

/// Moves every parameter off its initial value and raises the step sizes to
/// about 0.7: at the initial `delta` of 1e-3..0.1 the state path contributes
/// gradients near 1e-8, below what central differences resolve.
fn perturb(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    let mut init = Init::new(seed);
    for &id in ids {
        let noise = init.uniform(store.value(id).shape(), 0.3);
        let dt_bias = store.get(id).name.ends_with("dt_bias");
        store.value_mut(id).data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| {
            *v = if dt_bias { 0.3 + n } else { *v + n };
        });
    }
}

fn sampled(max_entries: usize, seed: u64) -> GradCheckOptions {
    GradCheckOptions { max_entries: Some(max_entries), seed, ..Default::default() }
}

/// One VSS block on a 3x4 grid with all parameters checked.
pub fn vss_block_case() -> Outcome {
    let mut store = ParamStore::new();
    let mut init = Init::new(41);
    let cfg = VssConfig { d_state: 3, ..VssConfig::new(3) };
    let p = VssBlockParams::new(&mut store, &mut init, &Path::root("vss"), cfg).unwrap();
    let ids: Vec<ParamId> = store.trainable().collect();
    perturb(&mut store, &ids, 40);
    check_params("vss_block", &store, &ids, vec![rand(&[2, 3, 4, 3], 42)], &sampled(6, 1), |ctx, v| {
        let y = vss_block(ctx, v[0], &p)?;
        project_ctx(ctx, y)
    })
}

/// Two MiM blocks in sequence, so the second inner update sees words that the
/// first already changed; checks both word and sentence inputs and every parameter.
pub fn mim_block_case() -> Outcome {
    let mut store = ParamStore::new();
    let mut init = Init::new(43);
    let cfg = MimBlockConfig {
        word_dim: 4,
        sentence_dim: 8,
        words_per_sentence: 4,
        d_state: 2,
        inner_enabled: true,
        outer_bypass: false,
        share_directions: false,
    };
    let blocks: Vec<MimBlockParams> =
        (0..2).map(|i| MimBlockParams::new(&mut store, &mut init, &Path::root("mim").child(i), cfg).unwrap()).collect();
    let ids: Vec<ParamId> = store.trainable().collect();
    perturb(&mut store, &ids, 46);
    // 1 image, 2x2 sentences of 2x2 words
    let extra = vec![rand(&[4, 2, 2, 4], 44), rand(&[1, 2, 2, 8], 45)];
    check_params("mim_block x2", &store, &ids, extra, &sampled(4, 2), |ctx, v| {
        let mut state = StageState { words: v[0], sentences: v[1] };
        for b in &blocks {
            state = mim_block(ctx, state, b)?;
        }
        let w = project_ctx(ctx, state.words)?;
        let s = project_ctx(ctx, state.sentences)?;
        ctx.g.add(w, s)
    })
}

/// Channel widths stay at 4 and above: layer norm over two channels is nearly
/// a sign function and leaves finite differences badly conditioned.
pub fn toy_config() -> MimConfig {
    MimConfig { word_dim: 4, sentence_dim: 8, d_state: 2, blocks_per_stage: [1; 4], ..MimConfig::default() }
}

/// Dice loss of the sigmoid output of a toy model against a fixed mask, checked
/// on the image and a seeded random subset of parameter tensors.
pub fn model_case(param_tensors: usize) -> Outcome {
    let cfg = toy_config();
    let (model, store) = MimModel::init(&cfg, 47).unwrap();
    let mut ids: Vec<ParamId> = store.trainable().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(48));
    ids.truncate(param_tensors);
    ids.sort_unstable_by_key(|id| id.index());
    let (h, w) = (cfg.height, cfg.width);
    let image = rand(&[2, cfg.in_channels, h, w], 49);
    let mask: Vec<f64> = (0..2 * h * w).map(|i| f64::from(u8::from((i % w) / 4 == (i / w % h) / 4))).collect();
    let mask = Tensor::new([2, 1, h, w], mask).unwrap();
    check_params("dice(model)", &store, &ids, vec![image], &sampled(3, 3), |ctx, v| {
        let logits = model.forward(ctx, v[0])?;
        let probs = ctx.g.sigmoid(logits)?;
        let t = ctx.g.constant(mask.clone());
        dice_loss(ctx.g, probs, t, 1.0)
    })
}

//! Acceptance run: one PASS/FAIL line per criterion with its wall time against
//! the budget. Exits nonzero if any criterion fails.
//!
//! `cargo test -p mim --test acceptance -- 7` runs only the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mim_core::arch::{MimConfig, MimModel};
use mim_core::complexity::{count_flops, ssm_flops, transformer_flops};
use mim_core::graph::FlopKind;
use mim_core::metrics::{binarize, iou, niou, pd_fa, MatchConfig};
use mim_core::params::{Ctx, Init, Mode, ParamStore, Path as ParamPath};
use mim_core::ss2d::{ss2d_forward, Ss2dParams};
use mim_core::ssm::{s6_forward, SsmParams, DEFAULT_STATE_DIM};
use mim_core::synth::{generate, SynthConfig};
use mim_core::train::{predict, stack, train_step, AdaGrad, TrainConfig};
use mim_core::{Graph, Tensor};

#[path = "../../core/tests/grad_suite/mod.rs"]
mod grad_suite;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use oracles::{dense_scan, iou_ref, max_abs_diff, niou_ref, pd_fa_ref, random_mask, ScanCase};

/// Outcome of one criterion: pass flag and a one-line detail.
type Verdict = (bool, String);

fn scan_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let (b, l, e) = (rng.gen_range(1..=2), rng.gen_range(1..=32), rng.gen_range(1..=4));
        let k = ScanCase::random(b, l, e, 16, 1000 + i);
        worst = worst.max(max_abs_diff(&k.fused(), &dense_scan(&k)));
    }
    (worst < 1e-10, format!("max abs error {worst:.2e} over 200 instances (L<=32, E<=4, N=16), limit 1e-10"))
}

fn gradient_suite() -> Verdict {
    let mut outcomes = grad_suite::all_ops();
    outcomes.push(grad_suite::vss_block_case());
    outcomes.push(grad_suite::mim_block_case());
    outcomes.push(grad_suite::model_case(24));
    let checked: usize = outcomes.iter().flat_map(|o| &o.report.params).map(|p| p.checked).sum();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    let worst = outcomes.iter().map(|o| o.report.max_rel_error()).fold(0.0, f64::max);
    let detail = format!(
        "{} cases, {checked} entries, worst rel error {worst:.2e} (tol 1e-4){}",
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    (failed.is_empty(), detail)
}

fn measured_s6(n: usize, d: usize) -> u64 {
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let p = SsmParams::new(&mut store, &mut init, &ParamPath::root("s6"), 2 * d, DEFAULT_STATE_DIM, d.div_ceil(16))
        .unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
    let x = ctx.g.constant(Tensor::zeros([1, n, 2 * d]));
    s6_forward(&mut ctx, x, &p).unwrap();
    g.flops().by_kind(FlopKind::Ssm)
}

fn complexity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(1..200), rng.gen_range(1..48));
        let r = measured_s6(n, d) as f64 / ssm_flops(n as u64, d as u64) as f64;
        worst = worst.max((r - 1.0).abs());
    }
    let report = |size| {
        let cfg = MimConfig { height: size, width: size, ..MimConfig::default() };
        let (model, store) = MimModel::init(&cfg, 0).unwrap();
        count_flops(&model, &store, 1).unwrap()
    };
    let (small, big) = (report(64), report(128));
    let enc = big.measured_encoder as f64 / small.measured_encoder as f64;
    let attn = transformer_flops(big.n, big.d) as f64 / transformer_flops(small.n, small.d) as f64;
    let pass = worst <= 0.05 && (enc - 4.0).abs() <= 0.1 && attn > 4.0;
    (
        pass,
        format!(
            "S6 core within {:.2}% of 128nd; encoder 128/64 ratio {enc:.4}; attention ratio {attn:.3}",
            100.0 * worst
        ),
    )
}

fn receptive_field() -> Verdict {
    let (h, w, e) = (8, 8, 4);
    let run = |store: &ParamStore, p: &Ss2dParams, z: Tensor| {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
        let zv = ctx.g.constant(z);
        let y = ss2d_forward(&mut ctx, zv, p).unwrap();
        ctx.g.value(y).data().to_vec()
    };
    let mut unreached = 0;
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = Ss2dParams::new(&mut store, &mut init, &ParamPath::root("ss2d"), e, 16, 1, false).unwrap();
        let z = init.uniform(&[1, h, w, e], 1.0);
        let base = run(&store, &p, z.clone());
        for pos in 0..h * w {
            let mut zp = z.clone();
            zp.data_mut()[pos * e] += 0.5;
            let out = run(&store, &p, zp);
            unreached += (0..h * w).filter(|q| (0..e).all(|c| out[q * e + c] == base[q * e + c])).count();
        }
    }
    (unreached == 0, format!("3 seeds x 64 perturbed locations on 8x8; {unreached} (input, output) pairs unreached"))
}

fn geometry() -> Verdict {
    let cfg = MimConfig::default();
    let (model, store) = MimModel::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
    let x = ctx.g.constant(Init::new(1).uniform(&[1, 3, 64, 64], 1.0));
    let outs = model.encode(&mut ctx, x).unwrap();
    let grids: Vec<_> = outs.iter().map(|&o| (ctx.g.shape(o)[1], ctx.g.shape(o)[2])).collect();
    let ups = model.upsample_features(&mut ctx, &outs).unwrap();
    let strides: Vec<_> = ups.iter().map(|&u| 64 / ctx.g.shape(u)[2]).collect();
    let y = model.forward(&mut ctx, x).unwrap();
    let out = ctx.g.shape(y).to_vec();
    let pass = grids == [(8, 8), (4, 4), (2, 2), (1, 1)] && strides == [4, 8, 16, 32] && out == [1, 1, 64, 64];
    (pass, format!("sentence grids {grids:?}, upsample strides {strides:?}, output {out:?}"))
}

/// One-pixel truth at (3, 3) against predictions on either side of the strict
/// `< 3` px centroid rule, with the expected detection count.
fn boundary_cases() -> Vec<(&'static str, Vec<u8>, Vec<u8>, usize)> {
    let mask = |pixels: &[(usize, usize)]| {
        let mut m = vec![0u8; 256];
        for &(r, c) in pixels {
            m[r * 16 + c] = 1;
        }
        m
    };
    let gt = mask(&[(3, 3)]);
    let shift = |cells: &[(usize, usize)]| cells.iter().map(|&(r, c)| (r + 3, c + 3)).collect::<Vec<_>>();
    vec![
        ("axis distance 3", gt.clone(), mask(&[(3, 6)]), 0),
        ("axis distance 2", gt.clone(), mask(&[(3, 5)]), 1),
        ("diagonal sqrt 8", gt.clone(), mask(&[(5, 5)]), 1),
        ("diagonal sqrt 10", gt.clone(), mask(&[(6, 4)]), 0),
        // centroid (9/5, 12/5) away: exactly 3
        ("fractional exactly 3", gt.clone(), mask(&shift(&[(1, 2), (2, 1), (2, 2), (2, 3), (2, 4)])), 0),
        // centroid (9/5, 11/5) away: sqrt(8.08)
        ("fractional inside", gt.clone(), mask(&shift(&[(1, 1), (2, 1), (2, 2), (2, 3), (2, 4)])), 1),
    ]
}

fn metrics_oracle() -> Verdict {
    let (h, w) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = Vec::new();
    let cfg = MatchConfig::default();
    for i in 0..1000 {
        let (p, g) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (pv, gv) = (vec![p.clone()], vec![g.clone()]);
        let r = pd_fa(&[&p], &[&g], h, w, &cfg).unwrap();
        let ok = iou(&[&p], &[&g]).unwrap().value == iou_ref(&pv, &gv)
            && niou(&[&p], &[&g]).unwrap().value == niou_ref(&pv, &gv)
            && (r.detected, r.targets, r.false_pixels) == pd_fa_ref(&p, &g, h, w, 3);
        if !ok {
            mismatches.push(format!("pair {i}"));
        }
    }
    let cases = boundary_cases();
    for (name, g, p, want) in &cases {
        let r = pd_fa(&[p], &[g], h, w, &cfg).unwrap();
        if r.detected != *want || pd_fa_ref(p, g, h, w, 3).0 != *want {
            mismatches.push((*name).to_string());
        }
    }
    let detail = format!(
        "1000 random 16x16 pairs + {} centroid boundary cases; {} mismatches{}",
        cases.len(),
        mismatches.len(),
        mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
    );
    (mismatches.is_empty(), detail)
}

/// Full-batch training on 8 synthetic images; returns (steps, first loss,
/// last loss, training IoU). Stops at the first check (every 10 steps) with
/// IoU >= 0.8, or at `max_steps`.
fn train_run(model_cfg: &MimConfig, max_steps: usize, stop_early: bool) -> (usize, f64, f64, f64) {
    let synth = SynthConfig { min_radius: 2.0, ..SynthConfig::default() };
    let samples = generate(&synth, 8).unwrap();
    let images: Vec<Tensor> = samples.iter().map(|s| s.image_tensor(3)).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask_tensor()).collect();
    let x = stack(&images.iter().collect::<Vec<_>>()).unwrap();
    let y = stack(&masks.iter().collect::<Vec<_>>()).unwrap();
    let gts: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();

    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let (model, mut store) = MimModel::init(model_cfg, 0).unwrap();
    let mut opt = AdaGrad::new(cfg.lr, cfg.weight_decay);
    let train_iou = |store: &ParamStore| {
        let probs = predict(&model, store, &x, cfg.precision).unwrap();
        let bins: Vec<Vec<u8>> = probs.data().chunks(64 * 64).map(|p| binarize(p, 0.5)).collect();
        iou(&bins.iter().map(Vec::as_slice).collect::<Vec<_>>(), &gts).unwrap().value
    };
    let (mut first, mut last, mut score) = (f64::NAN, f64::NAN, 0.0);
    for step in 1..=max_steps {
        last = train_step(&model, &mut store, &mut opt, &x, &y, &cfg).unwrap().loss;
        if step == 1 {
            first = last;
        }
        if step % 10 == 0 || step == max_steps {
            score = train_iou(&store);
            if stop_early && score >= 0.8 {
                return (step, first, last, score);
            }
        }
    }
    (max_steps, first, last, score)
}

fn learning() -> Verdict {
    let on = MimConfig::default();
    let (steps, first, last, score) = train_run(&on, 500, true);
    let drop = 1.0 - last / first;
    let off = MimConfig { inner_enabled: false, ..on };
    let (_, _, _, score_off) = train_run(&off, steps, false);
    let pass = score >= 0.8 && drop >= 0.5 && score_off != score;
    let detail = format!(
        "{steps} steps: train IoU {score:.4} (need 0.8), loss {first:.4} -> {last:.4} ({:.1}% drop, need 50%); \
         inner disabled: IoU {score_off:.4}",
        100.0 * drop
    );
    (pass, detail)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let (data, run, eval, pred) =
        (s(root.join("data")), s(root.join("run")), s(root.join("eval")), s(root.join("pred")));
    let ckpt = s(root.join("run/checkpoint.json"));
    let commands: [Vec<&str>; 4] = [
        vec!["synth", "--out", &data, "--count", "10", "--seed", "11"],
        vec!["train", "--data", &data, "--out", &run, "--seed", "11", "--max-steps", "6", "--batch-size", "4"],
        vec!["eval", "--data", &data, "--checkpoint", &ckpt, "--out", &eval, "--seed", "11"],
        vec!["predict", "--data", &data, "--checkpoint", &ckpt, "--out", &pred, "--seed", "11"],
    ];
    for args in commands {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = mim::cli::run(std::iter::once("mim").chain(args.iter().copied()), &mut o, &mut e);
        assert_eq!(code, 0, "{args:?}: {}", String::from_utf8_lossy(&e));
    }
    tree(root)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline(&dir.path().join("a"));
    let b = pipeline(&dir.path().join("b"));
    let differing: Vec<String> =
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect();
    let has = |p: &str| a.contains_key(Path::new(p));
    let complete = has("run/checkpoint.bin") && has("eval/metrics.json") && a.keys().any(|k| k.starts_with("pred"));
    let detail = format!(
        "two synth->train->eval->predict runs: {} files compared, {} differ{}",
        a.len(),
        differing.len(),
        differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
    );
    (differing.is_empty() && complete, detail)
}

type Check = fn() -> Verdict;

const CRITERIA: [(usize, &str, u64, Check); 8] = [
    (1, "scan oracle", 10, scan_oracle),
    (2, "gradient suite", 300, gradient_suite),
    (3, "complexity", 60, complexity),
    (4, "global receptive field", 30, receptive_field),
    (5, "geometry", 10, geometry),
    (6, "metrics oracle", 60, metrics_oracle),
    (7, "desk-scale learning", 600, learning),
    (8, "determinism", 900, determinism),
];

fn main() {
    // libtest flags (e.g. --nocapture) are ignored; bare numbers select criteria.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, budget, check) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = check();
        let took = t.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let ok = pass && in_time;
        failures += usize::from(!ok);
        println!(
            "{} {id} {name}: {detail} [{:.1} s of {budget} s{}]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use mim::cli::{help, run};
use mim::pipeline::{FLOPS, METRICS, ROC, TRAIN_REPORT};
use mim::schemas;
use mim_core::arch::MimModel;
use mim_core::complexity::{mim_block_flops, ssm_flops, transformer_flops};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mim(args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let argv = std::iter::once("mim").chain(args.iter().copied());
    let code = run(argv, &mut o, &mut e);
    Out { code, stdout: String::from_utf8(o).unwrap(), stderr: String::from_utf8(e).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let r = mim(args);
    assert_eq!(r.code, 0, "mim {args:?} failed: {}", r.stderr);
    r.stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A network small enough to train for a few steps in a test.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "model": {"word_dim": 4, "sentence_dim": 8, "d_state": 2, "blocks_per_stage": [1, 1, 1, 1]},
        "train": {"batch_size": 4, "max_steps": 2}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
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

fn assert_valid(schema_name: &str, doc: &Value) {
    let schema: Value = serde_json::from_str(schemas::get(schema_name).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:#?}");
}

fn read(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_flag() {
    insta::assert_snapshot!("help", help(None));
    for sub in ["synth", "train", "eval", "predict", "flops", "bench"] {
        let text = help(Some(sub));
        for flag in ["--config", "--seed", "--out", "--help"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
        insta::assert_snapshot!(format!("help_{sub}"), text);
    }
    let r = mim(&["train", "--help"]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.contains("--max-steps"));
}

#[test]
fn errors_are_one_json_line() {
    let r = mim(&["synth", "--out", "x", "--bogus"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.stderr.lines().count(), 1);
    let v: Value = serde_json::from_str(&r.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");
    assert!(v["error"]["message"].as_str().unwrap().contains("--bogus"));

    let r = mim(&["eval", "--data", "/definitely/not/here", "--predictor", "zero"]);
    assert_eq!(r.code, 1);
    let v: Value = serde_json::from_str(r.stderr.trim_end()).unwrap();
    assert_eq!(v["error"]["kind"], "not_found");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": -1}}"#).unwrap();
    let r = mim(&["flops", "--config", p(&bad)]);
    assert_eq!(r.code, 1);
    let v: Value = serde_json::from_str(r.stderr.trim_end()).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    std::fs::write(&bad, "{").unwrap();
    let v: Value = serde_json::from_str(mim(&["flops", "--config", p(&bad)]).stderr.trim_end()).unwrap();
    assert_eq!(v["error"]["kind"], "json");
    assert_eq!(mim(&["synth"]).code, 2);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_mim");
    let out = Command::new(exe).args(["eval", "--data", "/definitely/not/here"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
    let out = Command::new(exe).arg("--version").output().unwrap();
    assert!(out.status.success());
    let out = Command::new(exe).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--out", p(&a), "--count", "16", "--seed", "7"]);
    ok(&["synth", "--out", p(&b), "--count", "16", "--seed", "7"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 33);
    assert_eq!(ta, tb);
    assert_valid("mim.dataset", &read(&a.join("manifest.json")));

    let c = dir.path().join("c");
    ok(&["synth", "--out", p(&c), "--count", "16", "--seed", "8"]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn flops_match_the_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let report: Value = serde_json::from_str(&ok(&["flops", "--out", p(dir.path())])).unwrap();
    assert_eq!(report, read(&dir.path().join(FLOPS)));
    assert_valid("mim.flops", &report);
    let u = |k: &str| report[k].as_u64().unwrap();
    assert_eq!((u("height"), u("n"), u("m"), u("c"), u("d")), (64, 64, 16, 8, 32));
    assert_eq!(u("analytic_mim_block"), mim_block_flops(64, 16, 8, 32));
    assert_eq!(u("analytic_ssm"), ssm_flops(64, 32));
    assert_eq!(u("analytic_transformer_block"), transformer_flops(64, 32));
    for (s, stage) in report["stages"].as_array().unwrap().iter().enumerate() {
        let g = |k: &str| stage[k].as_u64().unwrap();
        assert_eq!(g("n"), 64 >> (2 * s));
        assert_eq!((g("c"), g("d")), (8 << s, 32 << s));
        assert_eq!(g("analytic_mim_block"), mim_block_flops(g("n"), g("m"), g("c"), g("d")));
    }
    let sum: u64 = report["breakdown"].as_array().unwrap().iter().map(|e| e["flops"].as_u64().unwrap()).sum();
    assert_eq!(sum, u("measured_total"));

    let big: Value = serde_json::from_str(&ok(&["flops", "--size", "128"])).unwrap();
    assert_eq!(big["n"].as_u64().unwrap(), 4 * u("n"));
}

#[test]
fn oracle_predictors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "10", "--seed", "3"]);

    let echo: Value = serde_json::from_str(&ok(&["eval", "--data", p(&data), "--predictor", "gt-echo"])).unwrap();
    assert_valid("mim.metrics", &echo);
    assert_eq!((echo["iou"].as_f64(), echo["niou"].as_f64()), (Some(1.0), Some(1.0)));
    assert_eq!((echo["pd"].as_f64(), echo["fa"].as_f64()), (Some(1.0), Some(0.0)));
    assert_eq!(echo["ids"].as_array().unwrap().len(), 2);

    let out = dir.path().join("zero");
    let zero: Value = serde_json::from_str(&ok(&[
        "eval",
        "--data",
        p(&data),
        "--predictor",
        "zero",
        "--subset",
        "all",
        "--out",
        p(&out),
    ]))
    .unwrap();
    assert_eq!((zero["iou"].as_f64(), zero["pd"].as_f64(), zero["fa"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    assert_eq!(zero["samples"], 10);
    assert_eq!(read(&out.join(METRICS)), zero);
    let roc = std::fs::read_to_string(out.join(ROC)).unwrap();
    assert!(roc.starts_with("fpr,tpr\n0.0,0.0\n"));

    let r = mim(&["eval", "--data", p(&data)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("--checkpoint"));
}

#[test]
fn train_eval_predict_with_a_tiny_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&["synth", "--out", p(&data), "--count", "10", "--seed", "1"]);
    let line: Value = serde_json::from_str(&ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--seed",
        "1",
    ]))
    .unwrap();
    assert_eq!(line["steps"], 2);
    assert_valid("mim.train", &read(&run_dir.join(TRAIN_REPORT)));
    let ckpt = run_dir.join("checkpoint.json");
    assert_valid("mim.checkpoint", &read(&ckpt));
    let history = mim::pipeline::read_history(&run_dir.join("history.csv")).unwrap();
    assert_eq!(history.iter().map(|h| h.step).collect::<Vec<_>>(), vec![0, 1]);

    let args = ["eval", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ckpt), "--seed", "1"];
    let first = ok(&args);
    assert_eq!(first, ok(&args), "evaluation is repeatable");
    let report: Value = serde_json::from_str(&first).unwrap();
    assert_valid("mim.metrics", &report);
    assert_eq!(report["checkpoint_step"], 2);

    // Without a config the checkpoint's own network is used.
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--seed", "1"]);
    // An explicit, different model section is refused.
    let other = dir.path().join("other.json");
    std::fs::write(&other, r#"{"model": {"word_dim": 6}}"#).unwrap();
    let r = mim(&["eval", "--config", p(&other), "--data", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("\"mismatch\""), "{}", r.stderr);

    let pred = dir.path().join("pred");
    ok(&["predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&pred), "--seed", "1"]);
    let masks = tree(&pred);
    assert_eq!(masks.len(), 2);
    for bytes in masks.values() {
        let img = mim::pgm::decode(bytes).unwrap();
        assert!(img.data.iter().all(|&v| v == 0 || v == 255));
    }

    let bench = dir.path().join("bench");
    let b: Value =
        serde_json::from_str(&ok(&["bench", "--checkpoint", p(&ckpt), "--repeat", "2", "--out", p(&bench)])).unwrap();
    assert_valid("mim.bench", &b);
    assert_eq!(b["seconds_per_image"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&["synth", "--out", p(&data), "--count", "4", "--seed", "2"]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run_dir), "--epochs", "0", "--seed", "5"]);
    let (_, store, manifest) = mim::checkpoint::load(&run_dir.join("checkpoint.json")).unwrap();
    let (_, init) = MimModel::init(&manifest.model, 5).unwrap();
    assert_eq!(store, init);
    assert_eq!(manifest.step, 0);
    let report = read(&run_dir.join(TRAIN_REPORT));
    assert_eq!(report["initial_loss"], Value::Null);
    assert_valid("mim.train", &report);
}

#[test]
fn periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&["synth", "--out", p(&data), "--count", "5", "--seed", "2"]);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--epochs",
        "3",
        "--max-steps",
        "10",
        "--checkpoint-every",
        "1",
    ]);
    let saved: Vec<_> = tree(&run_dir.join("checkpoints")).into_keys().collect();
    let names: Vec<_> = saved.iter().map(|p| p.to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["epoch_00001.bin", "epoch_00001.json", "epoch_00002.bin", "epoch_00002.json"]);
    let m = mim::checkpoint::read_manifest(&run_dir.join("checkpoints/epoch_00002.json")).unwrap();
    // 4 training samples at batch 4 is one step per epoch
    assert_eq!(m.step, 2);
}

#[test]
fn mismatched_resolution_needs_resize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"synth": {"height": 32, "width": 32}}"#).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data), "--count", "4"]);
    let r = mim(&["eval", "--data", p(&data), "--predictor", "gt-echo"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("mismatch"));
    let resized = dir.path().join("r.json");
    std::fs::write(&resized, r#"{"data": {"resize": 64}}"#).unwrap();
    let v: Value =
        serde_json::from_str(&ok(&["eval", "--config", p(&resized), "--data", p(&data), "--predictor", "gt-echo"]))
            .unwrap();
    assert_eq!(v["iou"].as_f64(), Some(1.0));
}

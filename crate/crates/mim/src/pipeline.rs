//! The work behind each subcommand, callable without the argument parser.
//!
//! Reports never contain absolute paths or timestamps (except `bench`), so two
//! runs with the same seed and config write byte-identical files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mim_core::arch::{MimConfig, MimModel, NUM_STAGES};
use mim_core::complexity::{count_flops, mim_block_flops, FlopsReport};
use mim_core::metrics::{binarize, evaluate, MetricsReport};
use mim_core::params::ParamStore;
use mim_core::synth::{generate_sample, Sample};
use mim_core::train::{fit, predict, stack, AdaGrad, HistoryEntry};
use mim_core::Tensor;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, load_samples, open_dataset, Subset};
use crate::error::{Error, Result};
use crate::pgm::{write_pgm, GrayImage};
use crate::{thread_pool, write_json, SCHEMA_VERSION};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const HISTORY: &str = "history.csv";
pub const RESOLVED_CONFIG: &str = "config.json";
pub const TRAIN_REPORT: &str = "train.json";
pub const METRICS: &str = "metrics.json";
pub const ROC: &str = "roc.csv";
pub const FLOPS: &str = "flops.json";
pub const BENCH: &str = "bench.json";

/// Any report body tagged with its schema name and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema: String,
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Report<T> {
    pub fn new(schema: &str, body: T) -> Self {
        Self { schema: schema.into(), schema_version: SCHEMA_VERSION, body }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- synth

/// Generates `count` samples in parallel and writes them as a dataset.
pub fn synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<dataset::Manifest> {
    cfg.synth.validate()?;
    let pool = thread_pool()?;
    let samples: Vec<Sample> = pool.install(|| {
        (0..count as u64).into_par_iter().map(|i| generate_sample(&cfg.synth, i)).collect::<Result<_, _>>()
    })?;
    create_dir(out)?;
    dataset::write_dataset(out, &samples, cfg.data.train_fraction, cfg.seed)
}

// ---------------------------------------------------------------- data

/// Split ids plus the loaded samples, checked against the model resolution.
pub fn load_subset(cfg: &RunConfig, model: &MimConfig, data: &Path, subset: Subset) -> Result<Vec<Sample>> {
    let manifest = open_dataset(data, cfg.data.train_fraction, cfg.seed)?;
    let samples = load_samples(data, &manifest, &manifest.ids(subset), cfg.data.resize)?;
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (model.height, model.width)) {
        return Err(Error::Mismatch(format!(
            "sample {} is {}x{} but the model expects {}x{} (set data.resize to rescale)",
            s.id, s.height, s.width, model.height, model.width
        )));
    }
    Ok(samples)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub parameters: usize,
    pub epochs: usize,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint: String,
}

/// Trains on the training split and writes the final checkpoint, periodic
/// checkpoints under `checkpoints/`, `history.csv`, the resolved config and
/// `train.json` into `out`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Report<TrainSummary>> {
    cfg.validate()?;
    let samples = load_subset(cfg, &cfg.model, data, Subset::Train)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image_tensor(cfg.model.in_channels)).collect();
    let masks: Vec<Tensor> = samples.iter().map(Sample::mask_tensor).collect();
    let (model, mut store) = MimModel::init(&cfg.model, cfg.seed)?;
    let mut opt = AdaGrad::new(cfg.train.lr, cfg.train.weight_decay);

    create_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch_size);
    let steps_at = |epoch: usize| {
        let s = epoch * steps_per_epoch;
        cfg.train.max_steps.map_or(s, |m| s.min(m))
    };
    let every = cfg.train.checkpoint_every;
    let history = fit(&model, &mut store, &mut opt, &images, &masks, &cfg.train, |epoch, store, _| {
        if every > 0 && epoch % every == 0 && epoch < cfg.train.epochs {
            let dir = out.join("checkpoints");
            create_dir(&dir).map_err(core_io)?;
            checkpoint::save(&dir.join(format!("epoch_{epoch:05}.json")), store, &cfg.model, steps_at(epoch))
                .map_err(core_io)?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        mim_core::Error::NonFinite { op } => {
            Error::Config(format!("training diverged: non-finite value from {op}; try a smaller train.lr"))
        }
        e => e.into(),
    })?;

    checkpoint::save(&out.join(CHECKPOINT), &store, &cfg.model, history.len())?;
    write_history(&out.join(HISTORY), &history)?;
    let report = Report::new(
        "mim.train",
        TrainSummary {
            samples: samples.len(),
            parameters: store.num_trainable(),
            epochs: history.last().map_or(0, |h| h.epoch),
            steps: history.len(),
            initial_loss: history.first().map(|h| h.loss),
            final_loss: history.last().map(|h| h.loss),
            checkpoint: CHECKPOINT.into(),
        },
    );
    write_json(&out.join(TRAIN_REPORT), &report)?;
    Ok(report)
}

// The epoch callback returns core errors; IO failures inside it are
// reported through the one string-carrying variant.
fn core_io(e: Error) -> mim_core::Error {
    mim_core::Error::Config(e.to_string())
}

pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for h in history {
        w.serialize(h).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

// ---------------------------------------------------------------- inference

/// Loads a checkpoint; `expected` (a model section set explicitly in the
/// config file) must then describe the same network.
pub fn load_model(path: &Path, expected: Option<&MimConfig>) -> Result<(MimModel, ParamStore, checkpoint::Manifest)> {
    let (model, store, manifest) = checkpoint::load(path)?;
    if let Some(cfg) = expected {
        checkpoint::ensure_matches(&manifest, cfg)?;
    }
    Ok((model, store, manifest))
}

/// Probability maps for each sample, in order. Batches of `batch` run in
/// parallel; each batch is independent, so the result does not depend on the
/// thread count.
pub fn infer(model: &MimModel, store: &ParamStore, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let pool = thread_pool()?;
    let channels = model.cfg.in_channels;
    let batches: Vec<Vec<Vec<f64>>> = pool.install(|| {
        samples
            .par_chunks(cfg.data.eval_batch)
            .map(|chunk| -> Result<Vec<Vec<f64>>> {
                let images: Vec<Tensor> = chunk.iter().map(|s| s.image_tensor(channels)).collect();
                let x = stack(&images.iter().collect::<Vec<_>>())?;
                let probs = predict(model, store, &x, cfg.train.precision)?;
                let per = probs.numel() / chunk.len();
                Ok(probs.data().chunks(per).map(<[f64]>::to_vec).collect())
            })
            .collect::<Result<_>>()
    })?;
    Ok(batches.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// The trained network (needs a checkpoint).
    Model,
    /// Echoes the ground-truth mask; an oracle for checking the metrics.
    GtEcho,
    /// Predicts background everywhere.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub predictor: Predictor,
    pub subset: Subset,
    pub ids: Vec<String>,
    /// Optimizer steps of the evaluated checkpoint.
    pub checkpoint_step: Option<usize>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub struct EvalRequest<'a> {
    pub data: &'a Path,
    pub checkpoint: Option<&'a Path>,
    /// Model section that must match the checkpoint, if any.
    pub expected_model: Option<&'a MimConfig>,
    pub predictor: Predictor,
    pub subset: Subset,
}

/// Samples, their probability maps and the checkpoint step, if any.
type Scored = (Vec<Sample>, Vec<Vec<f64>>, Option<usize>);

fn probabilities(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<Scored> {
    match req.predictor {
        Predictor::Model => {
            let path = req.checkpoint.ok_or_else(|| Error::Config("the model predictor needs --checkpoint".into()))?;
            let (model, store, manifest) = load_model(path, req.expected_model)?;
            let samples = load_subset(cfg, &model.cfg, req.data, req.subset)?;
            let probs = infer(&model, &store, cfg, &samples)?;
            Ok((samples, probs, Some(manifest.step)))
        }
        Predictor::GtEcho | Predictor::Zero => {
            let samples = load_subset(cfg, &cfg.model, req.data, req.subset)?;
            let echo = req.predictor == Predictor::GtEcho;
            let probs = samples
                .iter()
                .map(|s| s.mask.iter().map(|&v| if echo { f64::from(v) } else { 0.0 }).collect())
                .collect();
            Ok((samples, probs, None))
        }
    }
}

/// Metrics over a split; with `out`, also writes `metrics.json` and `roc.csv`.
pub fn eval(cfg: &RunConfig, req: &EvalRequest<'_>, out: Option<&Path>) -> Result<Report<EvalSummary>> {
    cfg.validate()?;
    let (samples, probs, checkpoint_step) = probabilities(cfg, req)?;
    let first = samples.first().ok_or_else(|| Error::Config(format!("the {:?} split is empty", req.subset)))?;
    let p: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    let g: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    let metrics = evaluate(&p, &g, first.height, first.width, &cfg.eval)?;
    let report = Report::new(
        "mim.metrics",
        EvalSummary {
            predictor: req.predictor,
            subset: req.subset,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            checkpoint_step,
            metrics,
        },
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(METRICS), &report)?;
        let path = dir.join(ROC);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["fpr", "tpr"]).map_err(|e| csv_error(&path, e))?;
        for (fpr, tpr) in &report.body.metrics.roc {
            w.serialize((fpr, tpr)).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Writes one thresholded `{0, 255}` mask per sample to `out/<id>.pgm`.
pub fn predict_masks(
    cfg: &RunConfig,
    data: &Path,
    checkpoint_path: &Path,
    expected_model: Option<&MimConfig>,
    subset: Subset,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (model, store, _) = load_model(checkpoint_path, expected_model)?;
    let samples = load_subset(cfg, &model.cfg, data, subset)?;
    let probs = infer(&model, &store, cfg, &samples)?;
    create_dir(out)?;
    samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| {
            let mask = binarize(p, cfg.eval.threshold).into_iter().map(|v| v * 255).collect();
            let path = out.join(format!("{}.pgm", s.id));
            write_pgm(&path, &GrayImage::new(s.width, s.height, mask))?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------- flops

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub stage: usize,
    pub blocks: usize,
    pub n: u64,
    pub m: u64,
    pub c: u64,
    pub d: u64,
    /// Closed form for one block at this stage.
    pub analytic_mim_block: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsSummary {
    #[serde(flatten)]
    pub report: FlopsReport,
    pub stages: Vec<StageFlops>,
}

pub fn stage_flops(cfg: &MimConfig) -> Vec<StageFlops> {
    (0..NUM_STAGES)
        .map(|s| {
            let (hs, ws) = cfg.sentence_grid(s);
            let n = (hs * ws) as u64;
            let m = if cfg.inner_enabled { cfg.words_per_sentence() as u64 } else { 0 };
            let (c, d) = (cfg.word_dim_at(s) as u64, cfg.sentence_dim_at(s) as u64);
            StageFlops {
                stage: s + 1,
                blocks: cfg.blocks_per_stage[s],
                n,
                m,
                c,
                d,
                analytic_mim_block: mim_block_flops(n, m, c, d),
            }
        })
        .collect()
}

/// Analytic and measured FLOPs of one inference pass. Without a checkpoint
/// the network is freshly initialized; counts do not depend on weights.
pub fn flops(model: &MimModel, store: &ParamStore, batch: usize) -> Result<Report<FlopsSummary>> {
    let report = count_flops(model, store, batch)?;
    Ok(Report::new("mim.flops", FlopsSummary { report, stages: stage_flops(&model.cfg) }))
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub repeat: usize,
    pub warmup: usize,
    /// Wall time per image for each timed run.
    pub seconds_per_image: Vec<f64>,
    pub mean_seconds_per_image: f64,
    /// Sample standard deviation; zero for a single run.
    pub stddev_seconds_per_image: f64,
}

/// Times `repeat` inference passes over a batch of synthetic images after one
/// untimed warm-up pass.
pub fn bench(
    model: &MimModel,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: usize,
    repeat: usize,
) -> Result<Report<BenchSummary>> {
    if batch == 0 || repeat == 0 {
        return Err(Error::Config("bench needs batch and repeat of at least 1".into()));
    }
    let m = &model.cfg;
    let synth = mim_core::synth::SynthConfig { height: m.height, width: m.width, ..cfg.synth.clone() };
    let images: Vec<Tensor> = (0..batch as u64)
        .map(|i| Ok(generate_sample(&synth, i)?.image_tensor(m.in_channels)))
        .collect::<Result<_>>()?;
    let x = stack(&images.iter().collect::<Vec<_>>())?;
    predict(model, store, &x, cfg.train.precision)?;
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        std::hint::black_box(predict(model, store, &x, cfg.train.precision)?);
        times.push(t.elapsed().as_secs_f64() / batch as f64);
    }
    let mean = times.iter().sum::<f64>() / repeat as f64;
    let var =
        if repeat > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeat - 1) as f64 } else { 0.0 };
    Ok(Report::new(
        "mim.bench",
        BenchSummary {
            height: m.height,
            width: m.width,
            batch,
            repeat,
            warmup: 1,
            seconds_per_image: times,
            mean_seconds_per_image: mean,
            stddev_seconds_per_image: var.sqrt(),
        },
    ))
}

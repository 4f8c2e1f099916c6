//! Command-line front end.
//!
//! On failure a single JSON line `{"error":{"kind":...,"message":...}}` goes
//! to stderr. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use mim_core::arch::{MimConfig, MimModel};
use mim_core::params::ParamStore;

use crate::config::RunConfig;
use crate::dataset::Subset;
use crate::error::{Error, Result};
use crate::pipeline::{self, EvalRequest, Predictor};
use crate::{to_json, write_json};

#[derive(Debug, Parser)]
#[command(name = "mim", version, about = "Nested Mamba infrared small target segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images/, masks/, manifest.json)
    Synth(SynthArgs),
    /// Train on a dataset's training split
    Train(TrainArgs),
    /// Score predictions on a split and write metrics.json and roc.csv
    Eval(EvalArgs),
    /// Write thresholded masks for a split as PGM files
    Predict(PredictArgs),
    /// Report analytic and measured FLOPs of one forward pass
    Flops(FlopsArgs),
    /// Time forward passes
    Bench(BenchArgs),
}

/// Flags every subcommand accepts.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; keys it omits keep their defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for generation, splitting, initialization and shuffling (overrides the config)
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 16)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for checkpoint.json/.bin, history.csv, config.json and train.json
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Dataset directory
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Overrides train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides train.max_steps
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Overrides train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides train.checkpoint_every (epochs; 0 keeps only the final checkpoint)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Disable the word-level (inner) branch: sets model.inner_enabled = false
    #[arg(long)]
    pub no_inner: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for metrics.json and roc.csv; the report always goes to stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Checkpoint manifest (required by the model predictor)
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Predictor::Model)]
    pub predictor: Predictor,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// Overrides eval.threshold
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for <id>.pgm masks
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Dataset directory
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Checkpoint manifest
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// Overrides eval.threshold
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Model selection shared by `flops` and `bench`.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Use this checkpoint's network instead of a fresh one from the config
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Square input side; overrides model.height and model.width
    #[arg(long)]
    pub size: Option<usize>,
    /// Images per forward pass
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for flops.json; the report always goes to stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for bench.json; the report always goes to stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Timed runs after one warm-up
    #[arg(long, default_value_t = 10)]
    pub repeat: usize,
}

/// Config from defaults, file and `--seed`, plus the model section when the
/// file sets one explicitly.
fn resolve(common: &Common) -> Result<(RunConfig, Option<MimConfig>)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let explicit_model = match &common.config {
        Some(p) => {
            let raw: serde_json::Value = crate::read_json(p)?;
            raw.get("model").is_some().then(|| cfg.model.clone())
        }
        None => None,
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok((cfg, explicit_model))
}

fn emit<T: Serialize>(stdout: &mut dyn Write, value: &T) -> Result<()> {
    stdout.write_all(to_json(value).as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn summary_line(stdout: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(stdout, "{value}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn model_for(cfg: &mut RunConfig, args: &ModelArgs, explicit: Option<&MimConfig>) -> Result<(MimModel, ParamStore)> {
    if let Some(size) = args.size {
        cfg.model.height = size;
        cfg.model.width = size;
    }
    match &args.checkpoint {
        Some(p) => {
            let (model, store, _) = pipeline::load_model(p, explicit)?;
            Ok((model, store))
        }
        None => {
            cfg.model.validate()?;
            Ok(MimModel::init(&cfg.model, cfg.seed)?)
        }
    }
}

/// Executes a parsed command, writing reports to `stdout`.
pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let (cfg, _) = resolve(&a.common)?;
            let m = pipeline::synth(&cfg, a.count, &a.out)?;
            summary_line(
                stdout,
                serde_json::json!({"command": "synth", "samples": m.samples.len(), "train": m.split.train.len(), "test": m.split.test.len()}),
            )
        }
        Command::Train(a) => {
            let (mut cfg, _) = resolve(&a.common)?;
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if a.max_steps.is_some() {
                cfg.train.max_steps = a.max_steps;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.checkpoint_every {
                cfg.train.checkpoint_every = v;
            }
            if a.no_inner {
                cfg.model.inner_enabled = false;
            }
            let r = pipeline::train(&cfg, &a.data, &a.out)?;
            summary_line(
                stdout,
                serde_json::json!({"command": "train", "steps": r.body.steps, "initial_loss": r.body.initial_loss, "final_loss": r.body.final_loss}),
            )
        }
        Command::Eval(a) => {
            let (mut cfg, explicit) = resolve(&a.common)?;
            if let Some(t) = a.threshold {
                cfg.eval.threshold = t;
            }
            let req = EvalRequest {
                data: &a.data,
                checkpoint: a.checkpoint.as_deref(),
                expected_model: explicit.as_ref(),
                predictor: a.predictor,
                subset: a.subset,
            };
            let r = pipeline::eval(&cfg, &req, a.out.as_deref())?;
            emit(stdout, &r)
        }
        Command::Predict(a) => {
            let (mut cfg, explicit) = resolve(&a.common)?;
            if let Some(t) = a.threshold {
                cfg.eval.threshold = t;
            }
            let written = pipeline::predict_masks(&cfg, &a.data, &a.checkpoint, explicit.as_ref(), a.subset, &a.out)?;
            summary_line(stdout, serde_json::json!({"command": "predict", "masks": written.len()}))
        }
        Command::Flops(a) => {
            let (mut cfg, explicit) = resolve(&a.common)?;
            let (model, store) = model_for(&mut cfg, &a.model, explicit.as_ref())?;
            let r = pipeline::flops(&model, &store, a.model.batch)?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join(pipeline::FLOPS), &r)?;
            }
            emit(stdout, &r)
        }
        Command::Bench(a) => {
            let (mut cfg, explicit) = resolve(&a.common)?;
            let (model, store) = model_for(&mut cfg, &a.model, explicit.as_ref())?;
            let r = pipeline::bench(&model, &store, &cfg, a.model.batch, a.repeat)?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join(pipeline::BENCH), &r)?;
            }
            emit(stdout, &r)
        }
    }
}

/// Single-line machine-readable error.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
}

/// Parses `argv` (including the program name), runs it and returns the exit
/// code. Help and version text go to `stdout`; errors to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let text = e.render().to_string();
            let message = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(stderr, "{}", error_line("usage", message));
            return 2;
        }
    };
    match execute(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

/// Long help of the top level (`None`) or of a subcommand.
pub fn help(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand {
        None => cmd.render_long_help().to_string(),
        Some(name) => cmd
            .find_subcommand_mut(name)
            .unwrap_or_else(|| panic!("no subcommand {name}"))
            .render_long_help()
            .to_string(),
    }
}

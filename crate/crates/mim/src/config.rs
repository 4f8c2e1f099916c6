//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.
//!
//! The file may set any subset of keys; missing keys keep their defaults and
//! unknown keys are rejected. `--seed` replaces every seed in the file
//! (`seed`, `synth.seed`, `train.seed`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use mim_core::arch::MimConfig;
use mim_core::metrics::EvalOptions;
use mim_core::synth::SynthConfig;
use mim_core::train::TrainConfig;

use crate::dataset::DEFAULT_TRAIN_FRACTION;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of samples in the training split.
    pub train_fraction: f64,
    /// Resize loaded samples to this square side (bilinear images, nearest
    /// masks). `None` requires samples to match the model resolution.
    pub resize: Option<usize>,
    /// Batch size for inference in `eval`, `predict` and `bench`.
    pub eval_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_fraction: DEFAULT_TRAIN_FRACTION, resize: None, eval_batch: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the dataset split and model initialization.
    pub seed: u64,
    pub model: MimConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalOptions,
    pub data: DataConfig,
}

impl RunConfig {
    /// Defaults overlaid by `path` if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => crate::read_json(p),
            None => Ok(Self::default()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!("data.train_fraction {} outside (0, 1)", self.data.train_fraction)));
        }
        if self.data.resize == Some(0) || self.data.eval_batch == 0 {
            return Err(Error::Config("data.resize and data.eval_batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || self.eval.roc_thresholds < 2 {
            return Err(Error::Config(
                "eval.threshold must lie in [0, 1] and eval.roc_thresholds be at least 2".into(),
            ));
        }
        Ok(())
    }
}

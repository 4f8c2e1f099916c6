//! Files, datasets and the command line around [`mim_core`].
//!
//! - [`pgm`]: binary 8-bit PGM images.
//! - [`dataset`]: `images/` + `masks/` directories with a cached split.
//! - [`checkpoint`]: parameter blob plus JSON manifest.
//! - [`config`]: the layered run configuration.
//! - [`pipeline`]: synth / train / eval / predict / flops / bench.
//! - [`cli`]: argument parsing and machine-readable errors.
//!
//! Every JSON report carries `schema` and `schema_version` fields; the JSON
//! Schemas live in [`schemas`].

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod pipeline;
pub mod schemas;

pub use error::{Error, Result};

/// Version shared by every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the worker threads used for generation and
/// inference. Unset means one per core.
pub const THREADS_ENV: &str = "MIM_THREADS";

/// Pretty JSON with a trailing newline. Field order follows the struct
/// declarations, so equal values always produce equal bytes.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Thread pool sized by [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

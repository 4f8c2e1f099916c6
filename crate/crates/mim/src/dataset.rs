//! On-disk datasets: `images/<id>.pgm`, `masks/<id>.pgm` and a `manifest.json`
//! caching the sample list and the train/test split.
//!
//! Masks are stored as `{0, 255}`; on load any pixel at or above 128 is
//! foreground. Ids are sorted before splitting so the split never depends on
//! directory listing order.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mim_core::synth::Sample;

use crate::error::{Error, Result};
use crate::pgm::{read_pgm, write_pgm, GrayImage};
use crate::SCHEMA_VERSION;

pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub samples: Vec<SampleEntry>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
    All,
}

/// Deterministic shuffled split of the sorted ids. Both sides are non-empty.
pub fn dataset_split(ids: &[String], train_fraction: f64, seed: u64) -> Result<Split> {
    if ids.len() < 2 {
        return Err(Error::Config(format!("need at least 2 samples to split, got {}", ids.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("duplicate sample ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let test = sorted.split_off(n_train);
    Ok(Split { train: sorted, test })
}

fn entry(id: &str) -> SampleEntry {
    SampleEntry { id: id.to_string(), image: format!("{IMAGES}/{id}.pgm"), mask: format!("{MASKS}/{id}.pgm") }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes samples, masks and a manifest split with `seed`.
pub fn write_dataset(dir: &Path, samples: &[Sample], train_fraction: f64, seed: u64) -> Result<Manifest> {
    create_dir(&dir.join(IMAGES))?;
    create_dir(&dir.join(MASKS))?;
    let mut entries: Vec<SampleEntry> = samples.iter().map(|s| entry(&s.id)).collect();
    for (s, e) in samples.iter().zip(&entries) {
        write_pgm(&dir.join(&e.image), &GrayImage::new(s.width, s.height, s.image.clone()))?;
        let mask = s.mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        write_pgm(&dir.join(&e.mask), &GrayImage::new(s.width, s.height, mask))?;
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        samples: entries,
        split: dataset_split(&ids, train_fraction, seed)?,
        seed,
    };
    crate::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Sample ids with both an image and a mask, sorted.
pub fn scan_ids(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join(IMAGES);
    let listing = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for item in listing {
        let path = item.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                if dir.join(MASKS).join(format!("{id}.pgm")).is_file() {
                    ids.push(id.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Reads the cached manifest, or scans the directory, splits with `seed` and
/// caches the result.
pub fn open_dataset(dir: &Path, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let path = dir.join(MANIFEST);
    if path.is_file() {
        let m: Manifest = crate::read_json(&path)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::format(&path, format!("schema version {}", m.schema_version)));
        }
        return Ok(m);
    }
    let ids = scan_ids(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        samples: ids.iter().map(|id| entry(id)).collect(),
        split: dataset_split(&ids, train_fraction, seed)?,
        seed,
    };
    crate::write_json(&path, &manifest)?;
    Ok(manifest)
}

impl Manifest {
    pub fn ids(&self, subset: Subset) -> Vec<String> {
        match subset {
            Subset::Train => self.split.train.clone(),
            Subset::Test => self.split.test.clone(),
            Subset::All => self.samples.iter().map(|s| s.id.clone()).collect(),
        }
    }

    fn entry(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn resize(img: GrayImage, size: usize, filter: FilterType) -> GrayImage {
    if img.width == size && img.height == size {
        return img;
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data).expect("pixel count checked on read");
    let out = imageops::resize(&buf, size as u32, size as u32, filter);
    GrayImage::new(size, size, out.into_raw())
}

/// Loads the listed samples; `resize` rescales both image (bilinear) and mask
/// (nearest) to a square of that side.
pub fn load_samples(dir: &Path, manifest: &Manifest, ids: &[String], resize_to: Option<usize>) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let e = manifest.entry(id).ok_or_else(|| Error::Config(format!("sample {id} is not in the manifest")))?;
            let (ip, mp): (PathBuf, PathBuf) = (dir.join(&e.image), dir.join(&e.mask));
            let mut image = read_pgm(&ip)?;
            let mut mask = read_pgm(&mp)?;
            if (image.width, image.height) != (mask.width, mask.height) {
                return Err(Error::format(
                    &mp,
                    format!("mask size differs from image {}x{}", image.width, image.height),
                ));
            }
            if let Some(size) = resize_to {
                image = resize(image, size, FilterType::Triangle);
                mask = resize(mask, size, FilterType::Nearest);
            }
            Ok(Sample {
                id: id.clone(),
                height: image.height,
                width: image.width,
                image: image.data,
                mask: mask.data.iter().map(|&v| u8::from(v >= 128)).collect(),
            })
        })
        .collect()
}

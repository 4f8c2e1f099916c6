//! Deterministic synthetic infrared scenes: smooth clutter plus a few small
//! Gaussian targets whose half-maximum discs form the mask.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Half-maximum radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak intensity above the local background, in `[0, 1]` units.
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Box-blur radius applied (twice) to the clutter noise.
    pub smoothness: usize,
    /// Peak-to-peak clutter amplitude.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_targets: 1,
            max_targets: 3,
            min_radius: 1.0,
            max_radius: 4.0,
            min_contrast: 0.2,
            max_contrast: 0.8,
            smoothness: 3,
            clutter: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return bad(format!("target count range [{}, {}]", self.min_targets, self.max_targets));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad(format!("radius range [{}, {}]", self.min_radius, self.max_radius));
        }
        if !(0.0..=1.0).contains(&self.min_contrast) || !(self.min_contrast..=1.0).contains(&self.max_contrast) {
            return bad(format!("contrast range [{}, {}]", self.min_contrast, self.max_contrast));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return bad(format!("clutter {} outside [0, 1]", self.clutter));
        }
        // the largest target plus a one-pixel margin must fit
        let need = 2.0 * (self.max_radius + 1.0);
        if (self.height as f64) < need || (self.width as f64) < need {
            return bad(format!("{}x{} too small for radius {}", self.height, self.width, self.max_radius));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major 8-bit grayscale.
    pub image: Vec<u8>,
    /// Row-major, values in `{0, 1}`.
    pub mask: Vec<u8>,
}

impl Sample {
    /// Image replicated to `channels` planes, scaled to `[0, 1]`.
    pub fn image_tensor(&self, channels: usize) -> Tensor {
        let plane: Vec<f64> = self.image.iter().map(|&v| f64::from(v) / 255.0).collect();
        let data = plane.iter().copied().cycle().take(plane.len() * channels).collect();
        Tensor::from_parts(vec![channels, self.height, self.width], data)
    }

    /// Mask as `[1, H, W]` with values in `{0, 1}`.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.mask.iter().map(|&v| f64::from(v)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub contrast: f64,
}

fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if horizontal { src[y * w + q] } else { src[q * w + x] };
                }
                out[y * w + x] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    let a = pass(src, true);
    pass(&a, false)
}

fn rng_for(cfg: &SynthConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

fn place_targets(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Target> {
    let count = rng.gen_range(cfg.min_targets..=cfg.max_targets);
    let mut targets: Vec<Target> = Vec::with_capacity(count);
    let mut attempts = 0;
    while targets.len() < count && attempts < 1000 {
        attempts += 1;
        let radius = if cfg.max_radius > cfg.min_radius {
            rng.gen_range(cfg.min_radius..=cfg.max_radius)
        } else {
            cfg.min_radius
        };
        let contrast = if cfg.max_contrast > cfg.min_contrast {
            rng.gen_range(cfg.min_contrast..=cfg.max_contrast)
        } else {
            cfg.min_contrast
        };
        let margin = radius + 1.0;
        let row = rng.gen_range(margin..=(cfg.height as f64 - 1.0 - margin));
        let col = rng.gen_range(margin..=(cfg.width as f64 - 1.0 - margin));
        // keep masks at least two pixels apart so components stay distinct
        let clear = targets.iter().all(|t| {
            let d = libm::hypot(t.row - row, t.col - col);
            d > t.radius + radius + 3.0
        });
        if clear {
            targets.push(Target { row, col, radius, contrast });
        }
    }
    targets
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let smooth = box_blur(&box_blur(&noise, h, w, cfg.smoothness), h, w, cfg.smoothness);
    let (lo, hi) = smooth.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let base = rng.gen_range(0.15..0.35);
    let (gy, gx) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            base + cfg.clutter * (smooth[i] - lo) / span + gy * y + gx * x
        })
        .collect()
}

/// Generates sample `index`; identical `(seed, index)` give identical output.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(cfg, index);

    let mut image = background(cfg, &mut rng);
    let targets = place_targets(cfg, &mut rng);
    let mut mask = vec![0u8; h * w];
    for t in &targets {
        let k = core::f64::consts::LN_2 / (t.radius * t.radius);
        let reach = libm::ceil(3.0 * t.radius) as isize;
        let (cy, cx) = (libm::round(t.row) as isize, libm::round(t.col) as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let (dy, dx) = (y as f64 - t.row, x as f64 - t.col);
                let d2 = dy * dy + dx * dx;
                let i = y as usize * w + x as usize;
                image[i] += t.contrast * libm::exp(-k * d2);
                if d2 <= t.radius * t.radius {
                    mask[i] = 1;
                }
            }
        }
    }
    let image = image.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect();
    Ok(Sample { id: format!("synth_{index:05}"), height: h, width: w, image, mask })
}

/// The target list of sample `index`, for inspection and tests.
pub fn sample_targets(cfg: &SynthConfig, index: u64) -> Vec<Target> {
    let mut rng = rng_for(cfg, index);
    background(cfg, &mut rng);
    place_targets(cfg, &mut rng)
}

pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_sample(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_index() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(&cfg, 3).unwrap(), generate_sample(&cfg, 3).unwrap());
        assert_ne!(generate_sample(&cfg, 3).unwrap().image, generate_sample(&cfg, 4).unwrap().image);
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_sample(&cfg, 3).unwrap().image, generate_sample(&other, 3).unwrap().image);
    }

    #[test]
    fn mask_is_binary_and_nonempty() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let s = generate_sample(&cfg, i).unwrap();
            assert!(s.mask.iter().all(|&v| v <= 1));
            assert!(s.mask.contains(&1), "sample {i}");
            let n = sample_targets(&cfg, i).len();
            assert!((1..=3).contains(&n));
        }
    }

    #[test]
    fn zero_contrast_leaves_background() {
        let cfg = SynthConfig { min_contrast: 0.0, max_contrast: 0.0, ..SynthConfig::default() };
        let s = generate_sample(&cfg, 0).unwrap();
        assert!(s.mask.contains(&1));
        let bg: Vec<u8> = background(&cfg, &mut rng_for(&cfg, 0))
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect();
        assert_eq!(s.image, bg);
    }

    #[test]
    fn single_target_mask_area_bound() {
        let cfg =
            SynthConfig { min_targets: 1, max_targets: 1, min_radius: 2.0, max_radius: 2.0, ..Default::default() };
        for i in 0..10 {
            let s = generate_sample(&cfg, i).unwrap();
            let area = s.mask.iter().filter(|&&v| v == 1).count() as f64;
            assert!(area > 0.0 && area <= core::f64::consts::PI * 16.0);
        }
    }

    #[test]
    fn tensors_replicate_channels() {
        let s =
            generate_sample(&SynthConfig { height: 16, width: 16, max_radius: 2.0, ..Default::default() }, 0).unwrap();
        let t = s.image_tensor(3);
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert_eq!(&t.data()[..256], &t.data()[256..512]);
        assert_eq!(s.mask_tensor().shape(), &[1, 16, 16]);
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { min_targets: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { height: 4, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { max_contrast: 1.5, ..Default::default() }.validate().is_err());
    }
}

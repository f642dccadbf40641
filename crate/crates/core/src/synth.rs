//! Synthetic crowds: dark discs ("heads") on a noisy light background.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::PointSet;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use crate::Sample;

/// Upper bound on heads per synthetic image.
pub const MAX_HEADS: usize = 64;
const BACKGROUND: f64 = 0.8;
const HEAD: f64 = 0.15;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub width: usize,
    pub height: usize,
    pub min_heads: usize,
    pub max_heads: usize,
    pub blob_radius: f64,
    /// Half-width of the uniform pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_count: 8,
            test_count: 4,
            width: 64,
            height: 64,
            min_heads: 1,
            max_heads: 20,
            blob_radius: 3.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_heads > self.max_heads || self.max_heads > MAX_HEADS {
            return Err(Error::InvalidConfig(format!(
                "heads range {}..={} must lie within 0..={MAX_HEADS}",
                self.min_heads, self.max_heads
            )));
        }
        if !(self.blob_radius > 0.0) || 2.0 * self.blob_radius >= self.width.min(self.height) as f64 {
            return Err(Error::InvalidConfig(format!(
                "blob_radius {} does not fit a {}x{} image",
                self.blob_radius, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// An 8-bit grayscale image with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub points: PointSet,
}

impl SynthImage {
    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: gray_to_tensor(self.width, self.height, &self.pixels),
            points: self.points.clone(),
        }
    }
}

/// `(1, 3, h, w)` tensor in `[0, 1]` with the gray plane replicated.
pub fn gray_to_tensor(width: usize, height: usize, pixels: &[u8]) -> Tensor4<f32> {
    let plane = width * height;
    Tensor4::from_fn(Shape4::new(1, 3, height, width), |_, _, y, x| {
        f32::from(pixels[(y * width + x) % plane.max(1)]) / 255.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthImage>,
    pub test: Vec<SynthImage>,
}

fn generate_one(cfg: &SynthConfig, id: String, rng: &mut ChaCha8Rng) -> SynthImage {
    let (w, h, r) = (cfg.width, cfg.height, cfg.blob_radius);
    let heads = rng.random_range(cfg.min_heads..=cfg.max_heads);
    let margin = libm::ceil(r) as usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(heads);
    let mut attempts = 0;
    while points.len() < heads {
        let x = rng.random_range(margin..w - margin) as f64;
        let y = rng.random_range(margin..h - margin) as f64;
        attempts += 1;
        // keep discs apart while that is still easy, then accept overlaps
        let clear = points
            .iter()
            .all(|&(px, py)| libm::hypot(px - x, py - y) >= 2.0 * r + 1.0);
        if clear || attempts > PLACEMENT_ATTEMPTS {
            points.push((x, y));
        }
    }

    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let inside = points
                .iter()
                .any(|&(px, py)| libm::hypot(px - x as f64, py - y as f64) <= r);
            let base = if inside { HEAD } else { BACKGROUND };
            let v = base + cfg.noise * rng.random_range(-1.0..=1.0);
            pixels.push(libm::round(v.clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
    SynthImage {
        id,
        width: w,
        height: h,
        pixels,
        points: PointSet::new(w, h, points).expect("centres drawn inside the image"),
    }
}

/// Deterministic in `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.train_count)
        .map(|i| generate_one(cfg, format!("train_{i:04}"), &mut rng))
        .collect();
    let test = (0..cfg.test_count)
        .map(|i| generate_one(cfg, format!("test_{i:04}"), &mut rng))
        .collect();
    Ok(SynthDataset { train, test })
}

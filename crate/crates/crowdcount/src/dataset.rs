//! Loading images and annotations named by a manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crowdcount_core::synth::gray_to_tensor;
use crowdcount_core::{Sample, Shape4, Tensor4};
use rayon::prelude::*;

use crate::annotation::read_annotation;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry};

/// Decoded 8-bit pixels, one or three interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    /// `(1, 3, h, w)` in `[0, 1]`; gray images are replicated to three channels.
    pub fn to_tensor(&self) -> Tensor4<f32> {
        match self.channels {
            1 => gray_to_tensor(self.width, self.height, &self.pixels),
            _ => Tensor4::from_fn(Shape4::new(1, 3, self.height, self.width), |_, c, y, x| {
                f32::from(self.pixels[(y * self.width + x) * 3 + c]) / 255.0
            }),
        }
    }
}

/// Turns an image file into pixels. Tests substitute in-memory grids.
pub trait ImageDecoder: Sync {
    fn decode(&self, path: &Path) -> Result<RawImage>;
}

/// Decodes files on disk with the `image` crate. Gray images stay single-channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct FileDecoder;

impl ImageDecoder for FileDecoder {
    fn decode(&self, path: &Path) -> Result<RawImage> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
        );
        Ok(if gray {
            RawImage {
                width,
                height,
                channels: 1,
                pixels: img.into_luma8().into_raw(),
            }
        } else {
            RawImage {
                width,
                height,
                channels: 3,
                pixels: img.into_rgb8().into_raw(),
            }
        })
    }
}

/// In-memory images keyed by path.
#[derive(Clone, Debug, Default)]
pub struct MemoryDecoder {
    pub images: HashMap<PathBuf, RawImage>,
}

impl ImageDecoder for MemoryDecoder {
    fn decode(&self, path: &Path) -> Result<RawImage> {
        self.images.get(path).cloned().ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            message: "no such in-memory image".into(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Annotation points moved inward because they lay outside their image.
    pub clamped_points: usize,
    /// Entries that could not be read, as `(id, reason)`. Always empty from
    /// [`load_dataset`], which fails instead.
    pub skipped: Vec<(String, String)>,
}

fn load_entry(entry: &ManifestEntry, decoder: &dyn ImageDecoder) -> Result<(Sample, usize)> {
    let annotation = read_annotation(&entry.annotation)?;
    let raw = decoder.decode(&entry.image)?;
    if raw.channels != 1 && raw.channels != 3 || raw.pixels.len() != raw.width * raw.height * raw.channels {
        return Err(Error::Decode {
            path: entry.image.clone(),
            message: format!(
                "{} bytes for a {}x{}x{} image",
                raw.pixels.len(),
                raw.width,
                raw.height,
                raw.channels
            ),
        });
    }
    if (raw.width, raw.height) != (annotation.width, annotation.height) {
        return Err(Error::format(
            &entry.annotation,
            format!(
                "annotation size {}x{} differs from image size {}x{}",
                annotation.width, annotation.height, raw.width, raw.height
            ),
        ));
    }
    let (points, clamped) = annotation.point_set();
    let sample = Sample {
        id: entry.id.clone(),
        image: raw.to_tensor(),
        points,
    };
    Ok((sample, clamped))
}

fn load_all(manifest: &Manifest, decoder: &dyn ImageDecoder, parallel: bool) -> Vec<Result<(Sample, usize)>> {
    if parallel {
        manifest.entries.par_iter().map(|e| load_entry(e, decoder)).collect()
    } else {
        manifest.entries.iter().map(|e| load_entry(e, decoder)).collect()
    }
}

/// Loads every entry in manifest order. The first unreadable entry fails the
/// whole load. `parallel` only changes speed, never the result.
pub fn load_dataset(manifest: &Manifest, decoder: &dyn ImageDecoder, parallel: bool) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut clamped_points = 0;
    for r in load_all(manifest, decoder, parallel) {
        let (s, c) = r?;
        clamped_points += c;
        samples.push(s);
    }
    Ok(Dataset {
        samples,
        clamped_points,
        skipped: Vec::new(),
    })
}

/// Like [`load_dataset`], but unreadable entries are listed in `skipped`.
pub fn load_dataset_lenient(manifest: &Manifest, decoder: &dyn ImageDecoder, parallel: bool) -> Dataset {
    let mut out = Dataset {
        samples: Vec::new(),
        clamped_points: 0,
        skipped: Vec::new(),
    };
    for (entry, r) in manifest.entries.iter().zip(load_all(manifest, decoder, parallel)) {
        match r {
            Ok((s, c)) => {
                out.clamped_points += c;
                out.samples.push(s);
            }
            Err(e) => out.skipped.push((entry.id.clone(), e.to_string())),
        }
    }
    out
}

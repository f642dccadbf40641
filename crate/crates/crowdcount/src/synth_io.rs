//! Writes a synthetic dataset as PNG images, annotation JSON and manifests:
//!
//! ```text
//! <dir>/images/<id>.png
//! <dir>/annotations/<id>.json
//! <dir>/train.csv
//! <dir>/test.csv
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crowdcount_core::synth::{SynthDataset, SynthImage};

use crate::annotation::{write_annotation, Annotation};
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, Manifest, Split};

pub fn encode_gray_png(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec()).expect("pixel count matches");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

fn write_image(dir: &Path, img: &SynthImage) -> Result<(PathBuf, PathBuf)> {
    let image_rel = PathBuf::from("images").join(format!("{}.png", img.id));
    let ann_rel = PathBuf::from("annotations").join(format!("{}.json", img.id));
    let image_path = dir.join(&image_rel);
    fs::write(&image_path, encode_gray_png(img.width, img.height, &img.pixels))
        .map_err(|e| Error::io(&image_path, e))?;
    let name = format!("{}.png", img.id);
    write_annotation(&dir.join(&ann_rel), &Annotation::from_points(name, &img.points))?;
    Ok((image_rel, ann_rel))
}

/// Returns the train and test manifests that were written.
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<(Manifest, Manifest)> {
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut out = Vec::new();
    for (images, split, file) in [
        (&data.train, Split::Train, "train.csv"),
        (&data.test, Split::Test, "test.csv"),
    ] {
        let rows = images
            .iter()
            .map(|img| write_image(dir, img))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest::new(dir, split, &rows)?;
        write_manifest(&dir.join(file), &manifest)?;
        out.push(manifest);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

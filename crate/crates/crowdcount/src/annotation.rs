//! Per-image head annotations stored as JSON:
//! `{"image": name, "width": W, "height": H, "points": [[x, y], ...]}`.
//!
//! Datasets with other annotation schemes convert by listing each head centre
//! in pixel coordinates of the stored image, with x growing to the right and
//! y downwards, and `width`/`height` matching the decoded image.

use std::fs;
use std::path::Path;

use crowdcount_core::density::PointSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn from_points(image: impl Into<String>, points: &PointSet) -> Self {
        Self {
            image: image.into(),
            width: points.width,
            height: points.height,
            points: points.points.iter().map(|&(x, y)| [x, y]).collect(),
        }
    }

    /// Points clamped into the image, with the number that had to move.
    pub fn point_set(&self) -> (PointSet, usize) {
        let pts = self.points.iter().map(|&[x, y]| (x, y)).collect();
        PointSet::clamped(self.width, self.height, pts)
    }
}

pub fn parse_annotation(text: &str, path: &Path) -> Result<Annotation> {
    let a: Annotation = serde_json::from_str(text).map_err(|e| Error::json(path, &e))?;
    if a.width == 0 || a.height == 0 {
        return Err(Error::format(
            path,
            format!("image size {}x{} is empty", a.width, a.height),
        ));
    }
    if let Some(p) = a.points.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::format(path, format!("non-finite point {p:?}")));
    }
    Ok(a)
}

pub fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation(&text, path)
}

pub fn write_annotation(path: &Path, a: &Annotation) -> Result<()> {
    let mut text = serde_json::to_string(a).expect("annotation serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

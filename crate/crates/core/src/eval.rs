//! Counting, the MAE / MSE metrics, and k-fold splits.
//!
//! Note on naming: "MSE" here is the *root* of the mean squared count error,
//! the convention of the crowd-counting literature.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::{DensityMap, PointSet};
use crate::error::{Error, Result};
use crate::model::{Model, OUTPUT_STRIDE};
use crate::train::crop_sample;
use crate::Sample;

/// Sum of the map with negative entries clamped to zero.
pub fn count_from_map(map: &DensityMap) -> f64 {
    map.data.iter().map(|&v| v.max(0.0)).sum()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageCount {
    pub id: String,
    pub truth: f64,
    pub estimate: f64,
    /// Annotations lost when the image was cropped to a multiple of 4.
    #[cfg_attr(feature = "serde", serde(default))]
    pub dropped_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    pub per_image: Vec<ImageCount>,
    /// Ids that could not be evaluated.
    #[cfg_attr(feature = "serde", serde(default))]
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(per_image: Vec<ImageCount>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyInput("metrics"));
        }
        let n = per_image.len() as f64;
        let (abs, sq) = per_image.iter().fold((0.0, 0.0), |(a, s), c| {
            let e = c.truth - c.estimate;
            (a + e.abs(), s + e * e)
        });
        Ok(Self {
            n: per_image.len(),
            mae: abs / n,
            mse: libm::sqrt(sq / n),
            per_image,
            skipped: Vec::new(),
        })
    }
}

/// Metrics over `(true count, estimated count)` pairs; ids are the pair indices.
pub fn metrics(pairs: &[(f64, f64)]) -> Result<MetricsReport> {
    MetricsReport::from_counts(
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(truth, estimate))| ImageCount {
                id: i.to_string(),
                truth,
                estimate,
                dropped_points: 0,
            })
            .collect(),
    )
}

/// Shuffles `ids` with a generator seeded by `seed`, cuts the result into `k`
/// contiguous folds whose sizes differ by at most one, and returns
/// `(train, test)` for fold `fold`.
pub fn kfold<S: Clone>(ids: &[S], k: usize, fold: usize, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if k < 2 || fold >= k {
        return Err(Error::InvalidConfig(format!(
            "need k >= 2 and fold < k, got k = {k}, fold = {fold}"
        )));
    }
    if k > ids.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} ids into {k} folds",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let start = fold * base + fold.min(extra);
    let end = start + base + usize::from(fold < extra);
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let mut train = pick(&order[..start]);
    train.extend(pick(&order[end..]));
    Ok((train, pick(&order[start..end])))
}

/// Crops an image on the right and bottom to multiples of `m`. Returns the
/// crop, the surviving points, and how many points were dropped.
pub fn crop_to_multiple(
    image: &crate::Tensor4<f32>,
    points: &PointSet,
    m: usize,
) -> Result<(crate::Tensor4<f32>, PointSet, usize)> {
    let s = image.shape();
    let (h, w) = (s.h / m * m, s.w / m * m);
    if h == 0 || w == 0 {
        return Err(Error::NotDivisible {
            h: s.h,
            w: s.w,
            factor: m,
        });
    }
    let (img, pts) = crop_sample(image, points, 0, 0, h, w)?;
    let dropped = points.len() - pts.len();
    Ok((img, pts, dropped))
}

/// Evaluates `predict` on every sample after cropping it to a multiple of 4.
/// The true count is the number of surviving annotations; the estimate is
/// [`count_from_map`] of the prediction.
pub fn evaluate_with(
    dataset: &[Sample],
    mut predict: impl FnMut(&Sample) -> Result<DensityMap>,
) -> Result<MetricsReport> {
    let mut counts = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let (image, points, dropped) = crop_to_multiple(&sample.image, &sample.points, OUTPUT_STRIDE)?;
        let cropped = Sample {
            id: sample.id.clone(),
            image,
            points,
        };
        let map = predict(&cropped)?;
        counts.push(ImageCount {
            id: cropped.id,
            truth: cropped.points.len() as f64,
            estimate: count_from_map(&map),
            dropped_points: dropped,
        });
    }
    MetricsReport::from_counts(counts)
}

/// Whole-image eval-mode evaluation of `model`.
pub fn evaluate(model: &Model<f32>, dataset: &[Sample]) -> Result<MetricsReport> {
    evaluate_with(dataset, |s| {
        let out = model.infer(&s.image)?;
        DensityMap::from_tensor(&out, 0, OUTPUT_STRIDE)
    })
}

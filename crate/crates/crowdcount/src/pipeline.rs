//! Training with on-disk artifacts, and evaluation over loaded datasets.

use std::fs;
use std::path::{Path, PathBuf};

use crowdcount_core::density::{DensityMap, KernelSpec};
use crowdcount_core::eval::{count_from_map, crop_to_multiple, ImageCount, MetricsReport};
use crowdcount_core::model::{Model, OUTPUT_STRIDE};
use crowdcount_core::train::{TrainConfig, Trainer};
use crowdcount_core::{Sample, Tensor4};
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::provenance::{write_provenance, Provenance};
use crate::report::loss_csv;

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.drck")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
}

/// Trains `model` in place, writing `loss.csv` and checkpoints (every
/// `cfg.checkpoint_every` iterations and after the last) into `out_dir`, each
/// with a provenance record. On divergence the partial loss trace is still
/// written before the error is returned.
pub fn train_to_dir(
    model: &mut Model<f32>,
    samples: &[Sample],
    kernel: KernelSpec,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: &Path,
    provenance: &Provenance,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let loss_path = out_dir.join("loss.csv");
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut trainer = Trainer::new(model, samples, kernel, cfg.clone())?;
    let mut failure = None;
    for it in 1..=cfg.iterations {
        match trainer.step() {
            Ok(loss) => losses.push(loss),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
        if it == cfg.iterations || (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
            let path = out_dir.join(checkpoint_name(it));
            save_checkpoint(&path, trainer.model(), seed, it)?;
            write_provenance(&path, provenance)?;
            checkpoints.push(path);
        }
    }
    fs::write(&loss_path, loss_csv(&losses)).map_err(|e| Error::io(&loss_path, e))?;
    write_provenance(&loss_path, provenance)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(TrainOutcome {
        losses,
        checkpoints,
        loss_csv: loss_path,
    })
}

/// Eval-mode density map of one image after cropping it to a multiple of 4.
pub fn predict_map(model: &Model<f32>, image: &Tensor4<f32>) -> Result<DensityMap> {
    let s = image.shape();
    let (h, w) = (s.h / OUTPUT_STRIDE * OUTPUT_STRIDE, s.w / OUTPUT_STRIDE * OUTPUT_STRIDE);
    if h == 0 || w == 0 {
        return Err(crowdcount_core::Error::NotDivisible {
            h: s.h,
            w: s.w,
            factor: OUTPUT_STRIDE,
        }
        .into());
    }
    let image = image.crop(0, 0, h, w)?;
    let out = model.infer(&image)?;
    Ok(DensityMap::from_tensor(&out, 0, OUTPUT_STRIDE)?)
}

pub fn count_image(model: &Model<f32>, image: &Tensor4<f32>) -> Result<f64> {
    Ok(count_from_map(&predict_map(model, image)?))
}

fn image_count(model: &Model<f32>, s: &Sample) -> Result<ImageCount> {
    let (image, points, dropped) = crop_to_multiple(&s.image, &s.points, OUTPUT_STRIDE)?;
    let map = DensityMap::from_tensor(&model.infer(&image)?, 0, OUTPUT_STRIDE)?;
    Ok(ImageCount {
        id: s.id.clone(),
        truth: points.len() as f64,
        estimate: count_from_map(&map),
        dropped_points: dropped,
    })
}

/// Whole-image evaluation in dataset order. Entries the loader skipped are
/// listed in the report's `skipped` field. Parallel and sequential runs give
/// identical reports.
pub fn evaluate_dataset(model: &Model<f32>, data: &Dataset, parallel: bool) -> Result<MetricsReport> {
    let counts: Vec<Result<ImageCount>> = if parallel {
        data.samples.par_iter().map(|s| image_count(model, s)).collect()
    } else {
        data.samples.iter().map(|s| image_count(model, s)).collect()
    };
    let counts = counts.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::from_counts(counts)?;
    report.skipped = data.skipped.iter().map(|(id, _)| id.clone()).collect();
    Ok(report)
}

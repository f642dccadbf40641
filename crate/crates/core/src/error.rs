use alloc::string::String;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: empty batch or zero-sized spatial dimension in {shape}")]
    Empty { op: &'static str, shape: Shape4 },
    #[error("maxpool2: spatial dims {h}x{w} must be even; crop the input first")]
    OddSpatial { h: usize, w: usize },
    #[error("batchnorm: a single value per channel in train mode (n*h*w = 1) has no variance")]
    DegenerateStatistics,
    #[error("dims {h}x{w} are not divisible by {factor}; crop to {} x {} first", h / factor * factor, w / factor * factor)]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("unsupported kernel {kh}x{kw}: only 1x1 and 3x3 kernels are supported")]
    UnsupportedKernel { kh: usize, kw: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("nearest-neighbour distances need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("backward called without a preceding train-mode forward pass")]
    BackwardWithoutForward,
    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGradient(String),
    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("crop {crop_h}x{crop_w} does not fit in image {h}x{w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("decode: {0}")]
    Decode(String),
}

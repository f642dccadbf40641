//! Ground-truth density maps from head annotations.
//!
//! Every head contributes a Gaussian splat that is truncated to its window (and
//! to the image) and then renormalized to unit mass, so the map always sums to
//! the head count. Maps are accumulated in `f64`; converting to an `f32`
//! tensor happens only at the training and serialization boundary.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_WINDOW: usize = 25;
pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_K_NEIGHBORS: usize = 3;
/// Lower bound on adaptive kernel widths, in pixels.
pub const MIN_ADAPTIVE_SIGMA: f64 = 1.0;

/// Head centres of one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<(f64, f64)>,
    pub width: usize,
    pub height: usize,
}

impl PointSet {
    /// Builds a set, rejecting points outside `[0, width) x [0, height)`.
    pub fn new(width: usize, height: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(&(x, y)) = points.iter().find(|&&(x, y)| !in_bounds(x, y, width, height)) {
            return Err(Error::InvalidConfig(format!(
                "point ({x}, {y}) outside {width}x{height} image"
            )));
        }
        Ok(Self { points, width, height })
    }

    /// Builds a set, moving out-of-bounds points onto the nearest in-bounds
    /// position. Returns the set and how many points were moved.
    pub fn clamped(width: usize, height: usize, points: Vec<(f64, f64)>) -> (Self, usize) {
        let mut moved = 0;
        let points = points
            .into_iter()
            .map(|(x, y)| {
                if in_bounds(x, y, width, height) {
                    (x, y)
                } else {
                    moved += 1;
                    (clamp_coord(x, width), clamp_coord(y, height))
                }
            })
            .collect();
        (Self { points, width, height }, moved)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            points: Vec::new(),
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64
}

fn clamp_coord(v: f64, len: usize) -> f64 {
    if v.is_nan() || v < 0.0 {
        0.0
    } else if v >= len as f64 {
        (len as f64 - 1.0).max(0.0)
    } else {
        v
    }
}

/// A single-channel non-negative grid whose sum is a head count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    /// Downsample factor relative to the source image.
    pub scale: usize,
    /// Row-major `height x width` values.
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scale: 1,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `(1, 1, height, width)` tensor.
    pub fn to_tensor(&self) -> Tensor4<f32> {
        Tensor4::from_vec(
            Shape4::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("length matches dims")
    }

    /// Reads sample `n`, channel 0 of a `(n, 1, h, w)` tensor.
    pub fn from_tensor(t: &Tensor4<f32>, n: usize, scale: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(Error::ShapeMismatch {
                op: "density map",
                detail: format!("tensor {s} is not a (n, 1, h, w) map batch with sample {n}"),
            });
        }
        Ok(Self {
            width: s.w,
            height: s.h,
            scale,
            data: t.plane(n, 0).iter().map(|&v| f64::from(v)).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KernelMode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct KernelSpec {
    pub mode: KernelMode,
    /// Odd window side for fixed kernels, in pixels.
    pub fixed_window: usize,
    pub fixed_sigma: f64,
    /// Adaptive kernels use `sigma_i = beta * mean kNN distance`.
    pub beta: f64,
    pub k_neighbors: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            mode: KernelMode::Fixed,
            fixed_window: DEFAULT_WINDOW,
            fixed_sigma: DEFAULT_SIGMA,
            beta: DEFAULT_BETA,
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }
}

impl KernelSpec {
    pub fn fixed(window: usize, sigma: f64) -> Self {
        Self {
            mode: KernelMode::Fixed,
            fixed_window: window,
            fixed_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn adaptive(beta: f64, k_neighbors: usize) -> Self {
        Self {
            mode: KernelMode::Adaptive,
            beta,
            k_neighbors,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed_window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "fixed_window must be odd, got {}",
                self.fixed_window
            )));
        }
        if !(self.fixed_sigma > 0.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fixed_sigma ({}) and beta ({}) must be positive",
                self.fixed_sigma, self.beta
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidConfig("k_neighbors must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean Euclidean distance from each point to its `min(k, N-1)` nearest other
/// points.
pub fn knn_mean_distance(points: &PointSet, k: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewPoints(n));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let k = k.min(n - 1);
    let mut dists = Vec::with_capacity(n - 1);
    let out = points
        .points
        .iter()
        .enumerate()
        .map(|(i, &(xi, yi))| {
            dists.clear();
            dists.extend(
                points
                    .points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &(xj, yj))| libm::hypot(xi - xj, yi - yj)),
            );
            if k < dists.len() {
                dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            }
            let sum: f64 = dists[..k].iter().sum();
            sum / k as f64
        })
        .collect();
    Ok(out)
}

/// Adds a unit-mass Gaussian splat centred on the rounded position of `(x, y)`.
fn splat(map: &mut DensityMap, x: f64, y: f64, sigma: f64, half: usize, weights: &mut Vec<f64>) {
    let cx = (libm::round(x) as usize).min(map.width - 1) as isize;
    let cy = (libm::round(y) as usize).min(map.height - 1) as isize;
    let h = half as isize;
    let x0 = (cx - h).max(0);
    let x1 = (cx + h).min(map.width as isize - 1);
    let y0 = (cy - h).max(0);
    let y1 = (cy + h).min(map.height as isize - 1);
    let denom = 2.0 * sigma * sigma;
    weights.clear();
    let mut mass = 0.0;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let (dx, dy) = ((xx - cx) as f64, (yy - cy) as f64);
            let v = libm::exp(-(dx * dx + dy * dy) / denom);
            mass += v;
            weights.push(v);
        }
    }
    let mut it = weights.iter();
    for yy in y0..=y1 {
        let row = yy as usize * map.width;
        for xx in x0..=x1 {
            map.data[row + xx as usize] += it.next().expect("one weight per cell") / mass;
        }
    }
}

/// Fixed-kernel map: a `fixed_window` square Gaussian of width `fixed_sigma`
/// per head.
pub fn fixed_density(points: &PointSet, spec: &KernelSpec) -> Result<DensityMap> {
    spec.validate()?;
    let mut map = DensityMap::zeros(points.width, points.height);
    let mut scratch = Vec::new();
    for &(x, y) in &points.points {
        splat(&mut map, x, y, spec.fixed_sigma, spec.fixed_window / 2, &mut scratch);
    }
    Ok(map)
}

/// Per-head `beta * mean kNN distance`, before flooring.
pub fn adaptive_sigmas(points: &PointSet, spec: &KernelSpec) -> Result<Vec<f64>> {
    Ok(knn_mean_distance(points, spec.k_neighbors)?
        .into_iter()
        .map(|d| spec.beta * d)
        .collect())
}

/// Geometry-adaptive map. Each head gets `sigma_i = max(beta * d_i, 1)` and a
/// `2*ceil(3*sigma_i)+1` window. Sets with fewer than two heads fall back to the
/// fixed kernel.
pub fn adaptive_density(points: &PointSet, spec: &KernelSpec) -> Result<DensityMap> {
    spec.validate()?;
    if points.len() < 2 {
        return fixed_density(points, spec);
    }
    let sigmas = adaptive_sigmas(points, spec)?;
    let mut map = DensityMap::zeros(points.width, points.height);
    let mut scratch = Vec::new();
    for (&(x, y), &raw) in points.points.iter().zip(&sigmas) {
        let sigma = raw.max(MIN_ADAPTIVE_SIGMA);
        let half = libm::ceil(3.0 * sigma) as usize;
        splat(&mut map, x, y, sigma, half, &mut scratch);
    }
    Ok(map)
}

/// Dispatches on `spec.mode`.
pub fn generate(points: &PointSet, spec: &KernelSpec) -> Result<DensityMap> {
    match spec.mode {
        KernelMode::Fixed => fixed_density(points, spec),
        KernelMode::Adaptive => adaptive_density(points, spec),
    }
}

/// Sum-pools `factor x factor` blocks, preserving the total.
pub fn downsample_sum(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || !map.width.is_multiple_of(factor) || !map.height.is_multiple_of(factor) {
        return Err(Error::NotDivisible {
            h: map.height,
            w: map.width,
            factor: factor.max(1),
        });
    }
    let (w, h) = (map.width / factor, map.height / factor);
    let mut data = vec![0.0; w * h];
    for y in 0..map.height {
        for x in 0..map.width {
            data[(y / factor) * w + x / factor] += map.get(y, x);
        }
    }
    Ok(DensityMap {
        width: w,
        height: h,
        scale: map.scale * factor,
        data,
    })
}

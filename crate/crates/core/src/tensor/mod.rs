//! Dense `(n, c, h, w)` tensors and the layer primitives of the network, each
//! with a forward pass and an analytic backward pass.
//!
//! Backward functions that produce parameter gradients *add* into the
//! parameter's gradient buffer instead of overwriting it, which is what lets a
//! weight-shared module collect contributions from every application.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub mod codec;
mod conv;
mod elementwise;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, ConvParams};
pub use elementwise::{add, add_backward, relu, relu_backward};
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_inference, BatchNormCache, BatchNormParams, NormMode, DEFAULT_BN_EPSILON,
    DEFAULT_BN_MOMENTUM,
};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(n, c, h, w)` values with an optional same-shape gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = value;
    }

    /// The `(h, w)` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Values and gradient buffer together, for in-place optimizer updates.
    pub fn split_grad_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// Converts element type; the gradient buffer is carried over.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v.cast()).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| v.cast()).collect()),
        }
    }

    /// Sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        Self {
            shape: Shape4::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[i * per..(i + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Concatenates along the batch axis. All parts must agree on `(c, h, w)`.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("stack"))?.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    detail: format!("{s} vs {first}"),
                });
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape4::new(n, first.c, first.h, first.w),
            data,
            grad: None,
        })
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of every sample and channel.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if top + h > s.h || left + w > s.w {
            return Err(Error::CropTooLarge {
                crop_h: h,
                crop_w: w,
                h: s.h.saturating_sub(top),
                w: s.w.saturating_sub(left),
            });
        }
        Ok(Self::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, x| {
            self.get(n, c, y + top, x + left)
        }))
    }

    /// Mirrors every plane left to right.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.shape.w;
        Self::from_fn(self.shape, |n, c, y, x| self.get(n, c, y, w - 1 - x))
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{a} vs {b}"),
        });
    }
    Ok(())
}

pub(crate) fn ensure_nonempty(op: &'static str, s: Shape4) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Empty { op, shape: s });
    }
    Ok(())
}

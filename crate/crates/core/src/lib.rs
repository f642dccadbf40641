//! Density-map crowd counting with deeply recursive residual networks.
//!
//! This crate is `no_std` (it needs `alloc`). It holds everything that is pure
//! computation: the 4-D tensor kernels with their analytic adjoints, ground-truth
//! density generation, the ResNet-14/20/26, R-ResNet and DR-ResNet
//! architectures with weight-shared recursion, momentum SGD, count metrics,
//! k-fold splitting and a synthetic crowd generator. File formats other than the
//! raw `DRT4` tensor codec, image decoding and the command line live in the
//! `crowdcount` crate.
//!
//! All production tensors are `f32`. Every kernel is generic over [`Scalar`] so
//! the same code runs in `f64` for finite-difference gradient checks.

#![no_std]
// `!(x > 0.0)` is how configuration checks reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod density;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};

/// One annotated image: a `(1, 3, h, w)` tensor in `[0, 1]` and its head points.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: alloc::string::String,
    pub image: Tensor4<f32>,
    pub points: density::PointSet,
}

//! File formats, dataset loading and the `crowdcount` command line on top of
//! [`crowdcount_core`].
//!
//! On-disk formats:
//! - `DRT4` tensors (see [`tensor_file`]) for density maps.
//! - `DRCK` checkpoints (see [`checkpoint`]).
//! - Annotation JSON per image and CSV manifests listing image/annotation pairs.
//! - A `*.provenance.json` record next to every artifact the CLI writes.

pub mod annotation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod provenance;
pub mod report;
pub mod synth_io;
pub mod tensor_file;

pub use error::{Error, Result};

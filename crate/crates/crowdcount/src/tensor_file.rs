//! DRT4 tensor files.

use std::fs;
use std::path::Path;

use crowdcount_core::tensor::codec;
use crowdcount_core::Tensor4;

use crate::error::{Error, Result};

pub fn write_tensor(path: &Path, tensor: &Tensor4<f32>) -> Result<()> {
    fs::write(path, codec::encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor4<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    codec::decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

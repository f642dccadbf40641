//! `DRT4` tensor records: the magic bytes `DRT4`, a little-endian `u32` format
//! version, four `u32` dims `(n, c, h, w)`, then `n*c*h*w` little-endian `f32`s.
//! Gradient buffers are not stored.

use alloc::format;
use alloc::vec::Vec;

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRT4";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 16;

pub fn encoded_len(shape: Shape4) -> usize {
    HEADER_LEN + 4 * shape.len()
}

pub fn encode_into(tensor: &Tensor4<f32>, out: &mut Vec<u8>) {
    let s = tensor.shape();
    out.reserve(encoded_len(s));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in s.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(tensor: &Tensor4<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(tensor, &mut out);
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Decodes one record from the front of `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor4<f32>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "DRT4 header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Decode(format!("bad magic {:?}, expected DRT4", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported DRT4 version {version}")));
    }
    let d: [usize; 4] = core::array::from_fn(|i| read_u32(bytes, 8 + 4 * i) as usize);
    let shape = Shape4::new(d[0], d[1], d[2], d[3]);
    let total = d
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Decode(format!("DRT4 dims {shape} overflow")))?;
    if bytes.len() < total {
        return Err(Error::Decode(format!(
            "DRT4 payload truncated: shape {shape} needs {total} bytes, got {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Tensor4::from_vec(shape, data)?, total))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after DRT4 record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

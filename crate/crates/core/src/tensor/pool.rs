use alloc::vec::Vec;

use super::{ensure_nonempty, ensure_same_shape, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat input index of the maximum of each output cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape4,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape4 {
        self.input_shape
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first position in row-major
/// order within the window.
pub fn maxpool2<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let s = input.shape();
    ensure_nonempty("maxpool2", s)?;
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::OddSpatial { h: s.h, w: s.w });
    }
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(os);
    let mut argmax = Vec::with_capacity(os.len());
    let data = input.data();
    let out_data = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let base = s.index(n, c, 2 * oy, 2 * ox);
                    let mut best = base;
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out_data[o] = data[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, PoolIndices { input_shape: s, argmax }))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2_backward<T: Scalar>(indices: &PoolIndices, out_grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = indices.input_shape;
    ensure_same_shape(
        "maxpool2_backward",
        out_grad.shape(),
        Shape4::new(s.n, s.c, s.h / 2, s.w / 2),
    )?;
    let mut in_grad = Tensor4::zeros(s);
    let dst = in_grad.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(out_grad.data()) {
        dst[i] += g;
    }
    Ok(in_grad)
}

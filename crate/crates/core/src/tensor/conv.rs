use alloc::format;
use alloc::vec;

use super::{ensure_nonempty, ensure_same_shape, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stride-1 convolution weights with "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_channels, in_channels, kh, kw)`.
    pub weight: Tensor4<T>,
    /// `(out_channels, 1, 1, 1)` when present.
    pub bias: Option<Tensor4<T>>,
    pub padding: (usize, usize),
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Option<Tensor4<T>>) -> Result<Self> {
        let s = weight.shape();
        if !matches!(s.h, 1 | 3) || !matches!(s.w, 1 | 3) {
            return Err(Error::UnsupportedKernel { kh: s.h, kw: s.w });
        }
        if let Some(b) = &bias {
            ensure_same_shape("conv2d bias", b.shape(), Shape4::new(s.n, 1, 1, 1))?;
        }
        Ok(Self {
            weight,
            bias,
            padding: ((s.h - 1) / 2, (s.w - 1) / 2),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    fn check_input(&self, op: &'static str, input: Shape4) -> Result<()> {
        ensure_nonempty(op, input)?;
        if input.c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "input {input} has {} channels, weights {} expect {}",
                    input.c,
                    self.weight.shape(),
                    self.in_channels()
                ),
            });
        }
        Ok(())
    }
}

/// Offset of kernel tap `k` relative to the output position, and the range of
/// output coordinates for which `out + offset` stays inside `[0, len)`.
#[inline]
fn tap_range(k: usize, pad: usize, len: usize) -> (isize, usize, usize) {
    let off = k as isize - pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (off, lo, hi.max(lo))
}

/// Cross-correlation of `input` with `params`, output `(n, out_channels, h, w)`.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    params.check_input("conv2d", s)?;
    let (kh, kw) = params.kernel();
    let (ph, pw) = params.padding;
    let oc_n = params.out_channels();
    let wts = params.weight.data();
    let mut out = Tensor4::zeros(Shape4::new(s.n, oc_n, s.h, s.w));

    for b in 0..s.n {
        for oc in 0..oc_n {
            let out_plane = out.plane_mut(b, oc);
            if let Some(bias) = &params.bias {
                out_plane.fill(bias.data()[oc]);
            }
            for ic in 0..s.c {
                let in_plane = input.plane(b, ic);
                let wbase = (oc * s.c + ic) * kh * kw;
                for ky in 0..kh {
                    let (dy, y0, y1) = tap_range(ky, ph, s.h);
                    for kx in 0..kw {
                        let (dx, x0, x1) = tap_range(kx, pw, s.w);
                        let wv = wts[wbase + ky * kw + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src = &in_plane[iy * s.w..(iy + 1) * s.w];
                            let dst = &mut out_plane[y * s.w..(y + 1) * s.w];
                            let ix0 = (x0 as isize + dx) as usize;
                            for (o, &i) in dst[x0..x1].iter_mut().zip(&src[ix0..ix0 + (x1 - x0)]) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]. Returns the input gradient and adds the weight and
/// bias gradients into `params`' gradient buffers.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &mut ConvParams<T>,
    out_grad: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let s = input.shape();
    params.check_input("conv2d_backward", s)?;
    let oc_n = params.out_channels();
    ensure_same_shape("conv2d_backward", out_grad.shape(), Shape4::new(s.n, oc_n, s.h, s.w))?;
    let (kh, kw) = params.kernel();
    let (ph, pw) = params.padding;
    let wts = params.weight.data();
    let mut in_grad = Tensor4::zeros(s);
    let mut w_grad = vec![T::zero(); wts.len()];

    for b in 0..s.n {
        for oc in 0..oc_n {
            let g_plane = out_grad.plane(b, oc);
            for ic in 0..s.c {
                let in_plane = input.plane(b, ic);
                let wbase = (oc * s.c + ic) * kh * kw;
                let ig_plane = in_grad.plane_mut(b, ic);
                for ky in 0..kh {
                    let (dy, y0, y1) = tap_range(ky, ph, s.h);
                    for kx in 0..kw {
                        let (dx, x0, x1) = tap_range(kx, pw, s.w);
                        let wi = wbase + ky * kw + kx;
                        let wv = wts[wi];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let g = &g_plane[y * s.w + x0..y * s.w + x1];
                            let src = &in_plane[iy * s.w + ix0..iy * s.w + ix0 + (x1 - x0)];
                            for (&gv, &iv) in g.iter().zip(src) {
                                acc += gv * iv;
                            }
                            let dst = &mut ig_plane[iy * s.w + ix0..iy * s.w + ix0 + (x1 - x0)];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                        w_grad[wi] += acc;
                    }
                }
            }
        }
    }
    params.weight.accumulate_grad(&w_grad);

    if let Some(bias) = params.bias.as_mut() {
        let mut b_grad = vec![T::zero(); oc_n];
        for b in 0..s.n {
            for (oc, slot) in b_grad.iter_mut().enumerate() {
                *slot += out_grad.plane(b, oc).iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        bias.accumulate_grad(&b_grad);
    }
    Ok(in_grad)
}

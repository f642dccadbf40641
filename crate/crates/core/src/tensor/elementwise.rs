use super::{ensure_same_shape, Tensor4};
use crate::error::Result;
use crate::scalar::Scalar;

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, out_grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same_shape("relu_backward", input.shape(), out_grad.shape())?;
    let mut g = out_grad.clone();
    g.clear_grad();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same_shape("add", a.shape(), b.shape())?;
    let mut out = a.clone();
    out.clear_grad();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Gradients of both summands.
pub fn add_backward<T: Scalar>(out_grad: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let mut g = out_grad.clone();
    g.clear_grad();
    (g.clone(), g)
}

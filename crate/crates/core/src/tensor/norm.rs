use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{ensure_nonempty, ensure_same_shape, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    /// `(c, 1, 1, 1)`.
    pub gamma: Tensor4<T>,
    /// `(c, 1, 1, 1)`.
    pub beta: Tensor4<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
    pub mode: NormMode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        let shape = Shape4::new(channels, 1, 1, 1);
        Self {
            gamma: Tensor4::filled(shape, T::one()),
            beta: Tensor4::zeros(shape),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::lit(DEFAULT_BN_EPSILON),
            momentum: T::lit(DEFAULT_BN_MOMENTUM),
            mode: NormMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn with_mode(mut self, mode: NormMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| v.cast()).collect(),
            running_var: self.running_var.iter().map(|v| v.cast()).collect(),
            epsilon: self.epsilon.cast(),
            momentum: self.momentum.cast(),
            mode: self.mode,
        }
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache<T = f32> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: NormMode,
}

/// Per-channel normalization. Train mode uses batch statistics and updates the
/// running statistics; eval mode only reads the running statistics.
pub fn batchnorm<T: Scalar>(
    input: &Tensor4<T>,
    params: &mut BatchNormParams<T>,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let s = input.shape();
    ensure_nonempty("batchnorm", s)?;
    if s.c != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            detail: format!("input {s} has {} channels, parameters have {}", s.c, params.channels()),
        });
    }
    let m = s.n * s.plane();
    let (mean, var) = match params.mode {
        NormMode::Train => {
            if m < 2 {
                return Err(Error::DegenerateStatistics);
            }
            let stats = batch_statistics(input);
            let unbias = T::lit(m as f64 / (m as f64 - 1.0));
            let keep = params.momentum;
            for c in 0..s.c {
                params.running_mean[c] = keep * params.running_mean[c] + (T::one() - keep) * stats.0[c];
                params.running_var[c] = keep * params.running_var[c] + (T::one() - keep) * stats.1[c] * unbias;
            }
            stats
        }
        NormMode::Eval => (params.running_mean.clone(), params.running_var.clone()),
    };

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v.max(T::zero()) + params.epsilon).sqrt())
        .collect();
    let mut x_hat = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (params.gamma.data()[c], params.beta.data()[c]);
            let (mu, is) = (mean[c], inv_std[c]);
            let src = input.plane(n, c);
            for (xh, &x) in x_hat.plane_mut(n, c).iter_mut().zip(src) {
                *xh = (x - mu) * is;
            }
            for (o, &xh) in out.plane_mut(n, c).iter_mut().zip(x_hat.plane(n, c)) {
                *o = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            mode: params.mode,
        },
    ))
}

/// Eval-mode normalization with the running statistics, whatever `params.mode`
/// says. Does not touch `params`.
pub fn batchnorm_inference<T: Scalar>(input: &Tensor4<T>, params: &BatchNormParams<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    ensure_nonempty("batchnorm", s)?;
    if s.c != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            detail: format!("input {s} has {} channels, parameters have {}", s.c, params.channels()),
        });
    }
    let mut out = Tensor4::zeros(s);
    for c in 0..s.c {
        let is = T::one() / (params.running_var[c].max(T::zero()) + params.epsilon).sqrt();
        let (mu, g, b) = (params.running_mean[c], params.gamma.data()[c], params.beta.data()[c]);
        for n in 0..s.n {
            for (o, &x) in out.plane_mut(n, c).iter_mut().zip(input.plane(n, c)) {
                *o = g * ((x - mu) * is) + b;
            }
        }
    }
    Ok(out)
}

/// Per-channel (mean, biased variance) over `n`, `h`, `w`.
fn batch_statistics<T: Scalar>(input: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let s = input.shape();
    let m = T::lit((s.n * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += input.plane(n, c).iter().fold(T::zero(), |a, &v| a + v);
        }
        mean[c] = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean[c]) * (v - mean[c]));
        }
        var[c] = sq / m;
    }
    (mean, var)
}

/// Adjoint of [`batchnorm`], including the dependence of the batch statistics
/// on the input in train mode. Adds into the gamma and beta gradients.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &mut BatchNormParams<T>,
    out_grad: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let s = cache.x_hat.shape();
    ensure_same_shape("batchnorm_backward", out_grad.shape(), s)?;
    let m = T::lit((s.n * s.plane()) as f64);
    let mut d_gamma = vec![T::zero(); s.c];
    let mut d_beta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&g, &xh) in out_grad.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                d_beta[c] += g;
                d_gamma[c] += g * xh;
            }
        }
    }

    let mut in_grad = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = params.gamma.data()[c] * cache.inv_std[c];
            let dst = in_grad.plane_mut(n, c);
            let g_plane = out_grad.plane(n, c);
            match cache.mode {
                NormMode::Train => {
                    let k = scale / m;
                    for ((d, &g), &xh) in dst.iter_mut().zip(g_plane).zip(cache.x_hat.plane(n, c)) {
                        *d = k * (m * g - d_beta[c] - xh * d_gamma[c]);
                    }
                }
                NormMode::Eval => {
                    for (d, &g) in dst.iter_mut().zip(g_plane) {
                        *d = scale * g;
                    }
                }
            }
        }
    }
    params.gamma.accumulate_grad(&d_gamma);
    params.beta.accumulate_grad(&d_beta);
    Ok(in_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(values: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_normalization() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.epsilon = 0.0;
        let (out, _) = batchnorm(&channel(&[1.0, 2.0, 3.0, 4.0]), &mut p).unwrap();
        let r5 = 5.0f64.sqrt();
        for (o, e) in out.data().iter().zip([-3.0 / r5, -1.0 / r5, 1.0 / r5, 3.0 / r5]) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut p = BatchNormParams::<f32>::new(1);
        let x = Tensor4::<f32>::filled(Shape4::new(2, 1, 3, 3), 4.25);
        let (out, _) = batchnorm(&x, &mut p).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut p = BatchNormParams::<f32>::new(2);
        p.gamma.data_mut().fill(0.0);
        p.beta.data_mut().fill(7.0);
        let x = Tensor4::<f32>::from_fn(Shape4::new(2, 2, 2, 2), |n, c, y, x| (n * 5 + c * 3 + y + x) as f32);
        let (out, _) = batchnorm(&x, &mut p).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn single_value_per_channel_rejected_in_train_mode() {
        let mut p = BatchNormParams::<f32>::new(3);
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 3, 1, 1));
        assert_eq!(batchnorm(&x, &mut p).unwrap_err(), Error::DegenerateStatistics);
        let mut p = p.with_mode(NormMode::Eval);
        assert!(batchnorm(&x, &mut p).is_ok());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut p = BatchNormParams::<f64>::new(1);
        batchnorm(&channel(&[1.0, 2.0, 3.0, 4.0]), &mut p).unwrap();
        // batch mean 2.5, unbiased variance 5/3
        assert!((p.running_mean[0] - 0.01 * 2.5).abs() < 1e-12);
        assert!((p.running_var[0] - (0.99 + 0.01 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics_only() {
        let mut p = BatchNormParams::<f64>::new(1).with_mode(NormMode::Eval);
        p.running_mean[0] = 1.0;
        p.running_var[0] = 4.0;
        p.epsilon = 0.0;
        let (out, _) = batchnorm(&channel(&[1.0, 3.0, 5.0]), &mut p).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(p.running_mean[0], 1.0);
        assert_eq!(
            batchnorm_inference(&channel(&[1.0, 3.0, 5.0]), &p).unwrap().data(),
            &[0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn train_output_is_standardized() {
        let mut p = BatchNormParams::<f32>::new(2);
        let x = Tensor4::<f32>::from_fn(Shape4::new(3, 2, 4, 4), |n, c, y, x| {
            ((n * 31 + c * 17 + y * 7 + x * 3) % 13) as f32 * (1.0 + c as f32) - 2.0
        });
        let (out, _) = batchnorm(&x, &mut p).unwrap();
        let (mean, var) = batch_statistics(&out);
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-3);
        }
    }
}

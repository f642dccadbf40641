//! Euclidean-loss training with momentum SGD and crop/flip augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{self, KernelSpec, PointSet};
use crate::error::{Error, Result};
use crate::model::{Model, ParameterStore, OUTPUT_STRIDE};
use crate::scalar::Scalar;
use crate::tensor::{ensure_same_shape, NormMode, Tensor4};
use crate::Sample;

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LrStep {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// `(height, width)`; both multiples of 4.
    pub crop: (usize, usize),
    pub flip_probability: f64,
    pub seed: u64,
    /// Off by default: a constant learning rate.
    pub lr_step: Option<LrStep>,
    /// Write a checkpoint every this many iterations; 0 disables periodic ones.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            iterations: 300,
            crop: (64, 64),
            flip_probability: 0.5,
            seed: 0,
            lr_step: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 || self.iterations == 0 {
            return bad(format!(
                "batch_size ({}) and iterations ({}) must be positive",
                self.batch_size, self.iterations
            ));
        }
        let (h, w) = self.crop;
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return bad(format!("crop {h}x{w} must be a positive multiple of {OUTPUT_STRIDE}"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability {} outside [0, 1]", self.flip_probability));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "need learning_rate >= 0, 0 <= momentum < 1, weight_decay >= 0 (got {}, {}, {})",
                self.learning_rate, self.momentum, self.weight_decay
            ));
        }
        if let Some(step) = self.lr_step {
            if step.every == 0 || !(step.factor > 0.0) {
                return bad(format!("lr_step needs every > 0 and factor > 0, got {step:?}"));
            }
        }
        Ok(())
    }

    /// Optimizer settings for 1-based iteration `iteration`.
    pub fn sgd_at(&self, iteration: usize) -> SgdSettings {
        let mut lr = self.learning_rate;
        if let Some(step) = self.lr_step {
            let decays = iteration.saturating_sub(1) / step.every;
            lr *= libm::pow(step.factor, decays as f64);
        }
        SgdSettings {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `L = 1/(2N) * sum((pred - target)^2)` over the whole batch of `N` maps, with
/// gradient `(pred - target) / N`.
pub fn euclidean_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    ensure_same_shape("euclidean_loss", pred.shape(), target.shape())?;
    let n = pred.shape().n;
    if n == 0 {
        return Err(Error::Empty {
            op: "euclidean_loss",
            shape: pred.shape(),
        });
    }
    let inv_n = T::lit(1.0 / n as f64);
    let mut grad = Tensor4::zeros(pred.shape());
    let mut sq = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sq += d.as_f64() * d.as_f64();
        *g = d * inv_n;
    }
    Ok((sq / (2.0 * n as f64), grad))
}

/// One velocity buffer per learnable tensor of the store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        Self {
            velocity: store
                .learnables()
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

/// `v <- momentum*v - lr*(g + decay*w); w <- w + v`, then clears gradients.
/// BN gamma and beta are not decayed. Fails before touching anything if a
/// gradient is missing.
pub fn sgd_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    state: &mut OptimizerState<T>,
    settings: &SgdSettings,
) -> Result<()> {
    let mut params = store.learnables_mut();
    if params.len() != state.velocity.len() {
        return Err(Error::InvalidConfig(format!(
            "optimizer state has {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !p.tensor.has_grad()) {
        return Err(Error::MissingGradient(format!("{}.{}", p.entry, p.kind.suffix())));
    }
    let lr = T::lit(settings.learning_rate);
    let mu = T::lit(settings.momentum);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let decay = if p.kind.decays() {
            T::lit(settings.weight_decay)
        } else {
            T::zero()
        };
        let (w, g) = p.tensor.split_grad_mut();
        let g = g.expect("checked above");
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v - lr * (g + decay * *w);
            *w += *v;
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

/// Spatial crop of an image and its points; points outside the window are
/// dropped and the rest shifted into crop coordinates.
pub fn crop_sample(
    image: &Tensor4<f32>,
    points: &PointSet,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<(Tensor4<f32>, PointSet)> {
    let s = image.shape();
    if top + height > s.h || left + width > s.w {
        return Err(Error::CropTooLarge {
            crop_h: height,
            crop_w: width,
            h: s.h,
            w: s.w,
        });
    }
    let (x0, y0) = (left as f64, top as f64);
    let (x1, y1) = (x0 + width as f64, y0 + height as f64);
    let kept = points
        .points
        .iter()
        .filter(|&&(x, y)| x >= x0 && x < x1 && y >= y0 && y < y1)
        .map(|&(x, y)| (x - x0, y - y0))
        .collect();
    Ok((
        image.crop(top, left, height, width)?,
        PointSet {
            points: kept,
            width,
            height,
        },
    ))
}

/// Mirrors the image left to right and maps `x -> width - 1 - x`. Points that
/// would land left of 0 (those in the last pixel's right half) are clamped to 0.
pub fn flip_sample(image: &Tensor4<f32>, points: &PointSet) -> (Tensor4<f32>, PointSet) {
    let w = points.width as f64;
    let flipped = points
        .points
        .iter()
        .map(|&(x, y)| ((w - 1.0 - x).max(0.0), y))
        .collect();
    (
        image.flip_horizontal(),
        PointSet {
            points: flipped,
            ..*points
        },
    )
}

/// Uniform random crop of `cfg.crop`, then a horizontal flip with probability
/// `cfg.flip_probability`.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor4<f32>,
    points: &PointSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Tensor4<f32>, PointSet)> {
    let s = image.shape();
    let (ch, cw) = cfg.crop;
    if ch > s.h || cw > s.w {
        return Err(Error::CropTooLarge {
            crop_h: ch,
            crop_w: cw,
            h: s.h,
            w: s.w,
        });
    }
    let top = rng.random_range(0..=s.h - ch);
    let left = rng.random_range(0..=s.w - cw);
    let (img, pts) = crop_sample(image, points, top, left, ch, cw)?;
    if rng.random_bool(cfg.flip_probability) {
        Ok(flip_sample(&img, &pts))
    } else {
        Ok((img, pts))
    }
}

/// Ground-truth map at the network's output resolution, `(1, 1, h/4, w/4)`.
pub fn density_target(points: &PointSet, kernel: &KernelSpec) -> Result<Tensor4<f32>> {
    let map = density::generate(points, kernel)?;
    Ok(density::downsample_sum(&map, OUTPUT_STRIDE)?.to_tensor())
}

/// Drives training one batch at a time.
pub struct Trainer<'a> {
    model: &'a mut Model<f32>,
    dataset: &'a [Sample],
    kernel: KernelSpec,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    state: OptimizerState<f32>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model<f32>, dataset: &'a [Sample], kernel: KernelSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        kernel.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyInput("training dataset"));
        }
        let (ch, cw) = cfg.crop;
        if let Some(s) = dataset
            .iter()
            .find(|s| s.image.shape().h < ch || s.image.shape().w < cw)
        {
            return Err(Error::CropTooLarge {
                crop_h: ch,
                crop_w: cw,
                h: s.image.shape().h,
                w: s.image.shape().w,
            });
        }
        let state = OptimizerState::new(model.store());
        Ok(Self {
            model,
            dataset,
            kernel,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            state,
            iteration: 0,
        })
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn model(&self) -> &Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Samples a batch with replacement, takes one SGD step and returns the
    /// batch loss measured before the update.
    pub fn step(&mut self) -> Result<f64> {
        let iteration = self.iteration + 1;
        let mut images = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let sample = &self.dataset[self.rng.random_range(0..self.dataset.len())];
            let (img, pts) = augment(&sample.image, &sample.points, &self.cfg, &mut self.rng)?;
            targets.push(density_target(&pts, &self.kernel)?);
            images.push(img);
        }
        let batch = Tensor4::stack(&images)?;
        let target = Tensor4::stack(&targets)?;

        let pred = self.model.forward(&batch, NormMode::Train)?;
        let (loss, grad) = euclidean_loss(&pred, &target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        self.model.backward(&grad)?;
        sgd_step(self.model.store_mut(), &mut self.state, &self.cfg.sgd_at(iteration))?;
        self.iteration = iteration;
        Ok(loss)
    }
}

/// Runs `cfg.iterations` steps and returns the per-iteration loss trace.
pub fn train(model: &mut Model<f32>, dataset: &[Sample], kernel: KernelSpec, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(model, dataset, kernel, cfg.clone())?;
    (0..cfg.iterations).map(|_| trainer.step()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelSpec, Param};
    use crate::tensor::Shape4;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn loss_zero_when_equal() {
        let a = t(&[1.0, -2.0, 3.5]);
        let (loss, g) = euclidean_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_single_element() {
        let (loss, g) = euclidean_loss(&t(&[2.0]), &t(&[0.0])).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(g.data(), &[2.0]);
    }

    #[test]
    fn loss_invariant_to_duplicated_batch() {
        let p = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 2, 3), |_, _, y, x| (y * 3 + x) as f64 * 0.3);
        let q = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 2, 3), |_, _, y, x| (x + 1) as f64 * 0.2 - y as f64);
        let (one, _) = euclidean_loss(&p, &q).unwrap();
        let p2 = Tensor4::stack(&[p.clone(), p]).unwrap();
        let q2 = Tensor4::stack(&[q.clone(), q]).unwrap();
        let (two, _) = euclidean_loss(&p2, &q2).unwrap();
        assert!((one - two).abs() < 1e-12);
        assert!(euclidean_loss(&p2, &t(&[1.0])).is_err());
    }

    fn single_weight_store(w: f64, g: f64) -> ParameterStore<f64> {
        let mut store = ParameterStore::default();
        let mut weight = Tensor4::filled(Shape4::new(1, 1, 1, 1), w);
        weight.accumulate_grad(&[g]);
        store.insert("w", Param::Conv(crate::tensor::ConvParams::new(weight, None).unwrap()));
        store
    }

    fn weight(store: &ParameterStore<f64>) -> f64 {
        store.learnables()[0].2.data()[0]
    }

    #[test]
    fn sgd_hand_computed_update() {
        let mut store = single_weight_store(1.0, 1.0);
        let mut state = OptimizerState::new(&store);
        let s = TrainConfig::default().sgd_at(1);
        sgd_step(&mut store, &mut state, &s).unwrap();
        // v = 0.9*0 - 0.01*(1 + 0.0005*1)
        assert!((state.buffers()[0][0] + 0.010005).abs() < 1e-15);
        assert!((weight(&store) - 0.989995).abs() < 1e-15);
        assert!(store.learnables()[0].2.grad().is_none());
    }

    #[test]
    fn sgd_zero_gradient_no_decay_is_noop() {
        let mut store = single_weight_store(0.7, 0.0);
        let mut state = OptimizerState::new(&store);
        let s = SgdSettings {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut store, &mut state, &s).unwrap();
        assert_eq!(weight(&store), 0.7);
    }

    #[test]
    fn plain_gradient_descent_two_steps() {
        let mut store = single_weight_store(1.0, 0.5);
        let mut state = OptimizerState::new(&store);
        let s = SgdSettings {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut store, &mut state, &s).unwrap();
        store.learnables_mut()[0].tensor.accumulate_grad(&[0.5]);
        sgd_step(&mut store, &mut state, &s).unwrap();
        assert!((weight(&store) - (1.0 - 2.0 * 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_missing_gradients() {
        let mut store = single_weight_store(1.0, 0.0);
        store.clear_grads();
        let mut state = OptimizerState::new(&store);
        let err = sgd_step(&mut store, &mut state, &TrainConfig::default().sgd_at(1)).unwrap_err();
        assert_eq!(err, Error::MissingGradient("w.weight".into()));
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut store = single_weight_store(2.0, 0.0);
        let mut state = OptimizerState::new(&store);
        let s = SgdSettings {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.01,
        };
        let mut prev = weight(&store);
        for _ in 0..20 {
            store.learnables_mut()[0].tensor.accumulate_grad(&[0.0]);
            sgd_step(&mut store, &mut state, &s).unwrap();
            let w = weight(&store);
            assert!(w.abs() < prev.abs());
            prev = w;
        }
    }

    #[test]
    fn bn_affine_not_decayed() {
        let mut m = Model::<f64>::build(ModelSpec::new(Arch::ResNet14), 0).unwrap();
        for l in m.store_mut().learnables_mut() {
            l.tensor.accumulate_grad(&vec![0.0; l.tensor.len()]);
        }
        let mut state = OptimizerState::new(m.store());
        let s = SgdSettings {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        sgd_step(m.store_mut(), &mut state, &s).unwrap();
        if let Some(Param::BatchNorm(bn)) = m.store().by_name("stem.bn") {
            assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
        } else {
            panic!("stem.bn missing");
        }
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig {
            lr_step: Some(LrStep { every: 10, factor: 0.1 }),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.sgd_at(10).learning_rate, 0.01);
        assert!((cfg.sgd_at(11).learning_rate - 0.001).abs() < 1e-15);
        assert_eq!(TrainConfig::default().sgd_at(1000).learning_rate, 0.01);
    }

    fn grid_image(w: usize, h: usize) -> Tensor4<f32> {
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| (c * 1000 + y * w + x) as f32)
    }

    #[test]
    fn flip_twice_restores() {
        let img = grid_image(8, 4);
        let pts = PointSet::new(8, 4, vec![(0.0, 1.0), (3.0, 2.5), (7.0, 0.0)]).unwrap();
        let (i1, p1) = flip_sample(&img, &pts);
        let (i2, p2) = flip_sample(&i1, &p1);
        assert_eq!(i2, img);
        assert_eq!(p2, pts);
    }

    #[test]
    fn mirror_formula() {
        let pts = PointSet::new(64, 64, vec![(10.0, 5.0)]).unwrap();
        let (_, p) = flip_sample(&grid_image(64, 64), &pts);
        assert_eq!(p.points, vec![(53.0, 5.0)]);
    }

    #[test]
    fn crop_without_heads_gives_zero_target() {
        let pts = PointSet::new(16, 16, vec![(14.0, 14.0)]).unwrap();
        let (img, p) = crop_sample(&grid_image(16, 16), &pts, 0, 0, 8, 8).unwrap();
        assert_eq!(img.shape(), Shape4::new(1, 3, 8, 8));
        assert!(p.is_empty());
        let target = density_target(&p, &KernelSpec::default()).unwrap();
        assert_eq!(target.shape(), Shape4::new(1, 1, 2, 2));
        assert!(target.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_shifts_points_and_pixels() {
        let pts = PointSet::new(16, 16, vec![(5.0, 6.0), (1.0, 1.0)]).unwrap();
        let img = grid_image(16, 16);
        let (c, p) = crop_sample(&img, &pts, 4, 2, 8, 8).unwrap();
        assert_eq!(p.points, vec![(3.0, 2.0)]);
        assert_eq!(c.get(0, 1, 0, 0), img.get(0, 1, 4, 2));
    }

    #[test]
    fn augment_rejects_oversized_crop() {
        let cfg = TrainConfig {
            crop: (32, 32),
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = PointSet::empty(16, 16);
        assert!(matches!(
            augment(&grid_image(16, 16), &pts, &cfg, &mut rng),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                crop: (30, 32),
                ..TrainConfig::default()
            },
            TrainConfig {
                flip_probability: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}

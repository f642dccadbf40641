//! The residual density-regression networks.
//!
//! Every architecture shares one skeleton: a 3x3 Conv&BN&ReLU stem, a 2x2 max
//! pool, residual module 1, a second pool, one or more residual modules at
//! quarter resolution, and a 1x1 reconstruction convolution to one channel. A
//! residual module is three blocks of `x + relu(bn(conv(relu(bn(conv(x))))))`.
//!
//! Recursion is expressed in the execution plan: a recursive module appears
//! several times in the plan but owns a single set of store entries, so
//! `y = f(f(f(x)))` costs the parameters of one `f`.
//!
//! BN running statistics are not learnable and each application sees a
//! different input distribution, so every application after the first keeps
//! its own running mean and variance. Gamma and beta stay shared.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    add, batchnorm, batchnorm_backward, batchnorm_inference, conv2d, conv2d_backward, maxpool2, maxpool2_backward,
    relu, relu_backward, BatchNormCache, BatchNormParams, ConvParams, NormMode, PoolIndices, Shape4, Tensor4,
};

mod store;

pub use store::{Learnable, LearnableKind, Param, ParamId, ParameterStore};

pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_RECURSION_DEPTH: usize = 3;
pub const BLOCKS_PER_MODULE: usize = 3;
pub const INPUT_CHANNELS: usize = 3;
/// Output maps are this many times smaller than the input along each axis.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Arch {
    #[cfg_attr(feature = "serde", serde(rename = "resnet14"))]
    ResNet14,
    #[cfg_attr(feature = "serde", serde(rename = "resnet20"))]
    ResNet20,
    #[cfg_attr(feature = "serde", serde(rename = "resnet26"))]
    ResNet26,
    /// Module 1 applied recursively.
    #[cfg_attr(feature = "serde", serde(rename = "r_resnet"))]
    RResNet,
    /// Module 2 applied recursively.
    #[cfg_attr(feature = "serde", serde(rename = "dr_resnet"))]
    DrResNet,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::ResNet14,
        Arch::ResNet20,
        Arch::ResNet26,
        Arch::RResNet,
        Arch::DrResNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet14 => "resnet14",
            Arch::ResNet20 => "resnet20",
            Arch::ResNet26 => "resnet26",
            Arch::RResNet => "r_resnet",
            Arch::DrResNet => "dr_resnet",
        }
    }

    /// Number of distinct residual modules.
    pub fn modules(self) -> usize {
        match self {
            Arch::ResNet20 => 3,
            Arch::ResNet26 => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown architecture `{s}` (expected resnet14, resnet20, resnet26, r_resnet or dr_resnet)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelSpec {
    pub arch: Arch,
    pub channels: usize,
    /// Applications of the recursive module; ignored by the plain ResNets.
    pub recursion_depth: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Arch::DrResNet,
            channels: DEFAULT_CHANNELS,
            recursion_depth: DEFAULT_RECURSION_DEPTH,
        }
    }
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.recursion_depth == 0 {
            return Err(Error::InvalidConfig(format!(
                "channels ({}) and recursion_depth ({}) must be positive",
                self.channels, self.recursion_depth
            )));
        }
        Ok(())
    }

    /// Convolution applications in one forward pass.
    pub fn depth(&self) -> usize {
        let per_module = 2 * BLOCKS_PER_MODULE;
        let applications = match self.arch {
            Arch::RResNet | Arch::DrResNet => 1 + self.recursion_depth,
            arch => arch.modules(),
        };
        2 + per_module * applications
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Convolution kernel elements only.
    ConvWeights,
    /// Kernels, conv biases and BN gamma/beta; running statistics excluded.
    AllLearnable,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ParamId,
    bn: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
struct ResidualModule {
    blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Stem,
    Pool,
    /// Module index and application number (0 for the first).
    Module(usize, usize),
    Reconstruct,
}

/// Running statistics of one BN entry for one extra application.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
struct ConvBnCache<T> {
    input: Tensor4<T>,
    bn: BatchNormCache<T>,
    normalized: Tensor4<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    first: ConvBnCache<T>,
    second: ConvBnCache<T>,
}

#[derive(Clone, Debug)]
enum StageCache<T> {
    Stem(ConvBnCache<T>),
    Pool(PoolIndices),
    Module(Vec<BlockCache<T>>),
    Reconstruct(Tensor4<T>),
}

/// A built network: parameters, the module wiring, and the execution plan.
pub struct Model<T = f32> {
    spec: ModelSpec,
    store: ParameterStore<T>,
    stem: ConvBn,
    modules: Vec<ResidualModule>,
    reconstruct: ParamId,
    plan: Vec<Stage>,
    /// Keyed by BN entry and application number (>= 1).
    app_stats: BTreeMap<(ParamId, usize), RunningStats<T>>,
    tape: Option<Vec<StageCache<T>>>,
    conv_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            store: self.store.clone(),
            stem: self.stem,
            modules: self.modules.clone(),
            reconstruct: self.reconstruct,
            plan: self.plan.clone(),
            app_stats: self.app_stats.clone(),
            tape: self.tape.clone(),
            conv_calls: AtomicUsize::new(self.conv_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("entries", &self.store.len())
            .field("plan", &self.plan)
            .finish()
    }
}

struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    /// He-normal weights, variance `2 / fan_in`.
    fn conv<T: Scalar>(&mut self, out_c: usize, in_c: usize, k: usize, bias: bool) -> ConvParams<T> {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0f64, libm::sqrt(2.0 / fan_in)).expect("positive std");
        let shape = Shape4::new(out_c, in_c, k, k);
        let data = (0..shape.len()).map(|_| T::lit(normal.sample(&mut self.rng))).collect();
        let weight = Tensor4::from_vec(shape, data).expect("length matches");
        let bias = bias.then(|| Tensor4::zeros(Shape4::new(out_c, 1, 1, 1)));
        ConvParams::new(weight, bias).expect("1x1 or 3x3 kernel")
    }
}

impl<T: Scalar> Model<T> {
    /// Builds `spec` with weights drawn from a generator seeded by `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let ch = spec.channels;
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParameterStore::default();
        let conv_bn =
            |store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, suffix: &str, in_c: usize| {
                let conv = store.insert(
                    format!("{prefix}.conv{suffix}"),
                    Param::Conv(init.conv(ch, in_c, 3, false)),
                );
                let bn = store.insert(
                    format!("{prefix}.bn{suffix}"),
                    Param::BatchNorm(BatchNormParams::new(ch)),
                );
                ConvBn { conv, bn }
            };

        let stem = conv_bn(&mut store, &mut init, "stem", "", INPUT_CHANNELS);
        let mut modules = Vec::new();
        for m in 0..spec.arch.modules() {
            let blocks = (0..BLOCKS_PER_MODULE)
                .map(|b| {
                    let prefix = format!("module{}.block{}", m + 1, b + 1);
                    Block {
                        first: conv_bn(&mut store, &mut init, &prefix, "1", ch),
                        second: conv_bn(&mut store, &mut init, &prefix, "2", ch),
                    }
                })
                .collect();
            modules.push(ResidualModule { blocks });
        }
        let reconstruct = store.insert("reconstruct.conv", Param::Conv(init.conv(1, ch, 1, true)));

        let repeat = |m: usize, times: usize| (0..times).map(move |a| Stage::Module(m, a));
        let mut plan = vec![Stage::Stem, Stage::Pool];
        match spec.arch {
            Arch::RResNet => {
                plan.extend(repeat(0, spec.recursion_depth));
                plan.push(Stage::Pool);
                plan.push(Stage::Module(1, 0));
            }
            Arch::DrResNet => {
                plan.push(Stage::Module(0, 0));
                plan.push(Stage::Pool);
                plan.extend(repeat(1, spec.recursion_depth));
            }
            _ => {
                plan.push(Stage::Module(0, 0));
                plan.push(Stage::Pool);
                plan.extend((1..modules.len()).map(|m| Stage::Module(m, 0)));
            }
        }
        plan.push(Stage::Reconstruct);

        let mut app_stats = BTreeMap::new();
        for stage in &plan {
            if let Stage::Module(m, a) = *stage {
                if a > 0 {
                    for block in &modules[m].blocks {
                        for id in [block.first.bn, block.second.bn] {
                            let bn = store.bn(id);
                            let stats = RunningStats {
                                mean: bn.running_mean.clone(),
                                var: bn.running_var.clone(),
                            };
                            app_stats.insert((id, a), stats);
                        }
                    }
                }
            }
        }

        Ok(Self {
            spec,
            store,
            stem,
            modules,
            reconstruct,
            plan,
            app_stats,
            tape: None,
            conv_calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    /// Distinct convolution layers (owner entries), not applications.
    pub fn conv_layers(&self) -> usize {
        self.store.iter().filter(|(_, p)| matches!(p, Param::Conv(_))).count()
    }

    /// Convolution applications since construction or the last reset.
    pub fn conv_applications(&self) -> usize {
        self.conv_calls.load(Ordering::Relaxed)
    }

    pub fn reset_conv_applications(&self) {
        self.conv_calls.store(0, Ordering::Relaxed);
    }

    pub fn count_parameters(&self, mode: CountMode) -> usize {
        self.store
            .learnables()
            .iter()
            .filter(|(_, kind, _)| mode == CountMode::AllLearnable || *kind == LearnableKind::Weight)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Same architecture and values in another element type. The tape is dropped.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            store: self.store.cast(),
            stem: self.stem,
            modules: self.modules.clone(),
            reconstruct: self.reconstruct,
            plan: self.plan.clone(),
            app_stats: self
                .app_stats
                .iter()
                .map(|(k, st)| {
                    let stats = RunningStats {
                        mean: st.mean.iter().map(|v| v.cast()).collect(),
                        var: st.var.iter().map(|v| v.cast()).collect(),
                    };
                    (*k, stats)
                })
                .collect(),
            tape: None,
            conv_calls: AtomicUsize::new(0),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if s.is_empty() {
            return Err(Error::Empty {
                op: "forward",
                shape: s,
            });
        }
        if s.c != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("expected {INPUT_CHANNELS} input channels, got batch {s}"),
            });
        }
        if !s.h.is_multiple_of(OUTPUT_STRIDE) || !s.w.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::NotDivisible {
                h: s.h,
                w: s.w,
                factor: OUTPUT_STRIDE,
            });
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor4<T>, id: ParamId) -> Result<Tensor4<T>> {
        self.conv_calls.fetch_add(1, Ordering::Relaxed);
        conv2d(x, self.store.conv(id))
    }

    /// Runs the network and records what [`Self::backward`] needs. Train mode
    /// normalizes with batch statistics and updates running statistics; eval
    /// mode reads the running statistics and gives the same values as
    /// [`Self::infer`].
    pub fn forward(&mut self, batch: &Tensor4<T>, mode: NormMode) -> Result<Tensor4<T>> {
        self.tape = None;
        self.check_input(batch)?;
        self.store.set_norm_mode(mode);
        let mut tape = Vec::with_capacity(self.plan.len());
        let mut x = batch.clone();
        x.clear_grad();
        for i in 0..self.plan.len() {
            x = match self.plan[i] {
                Stage::Stem => {
                    let (y, cache) = self.conv_bn_relu(&x, self.stem)?;
                    tape.push(StageCache::Stem(cache));
                    y
                }
                Stage::Pool => {
                    let (y, idx) = maxpool2(&x)?;
                    tape.push(StageCache::Pool(idx));
                    y
                }
                Stage::Module(m, app) => {
                    let mut caches = Vec::with_capacity(BLOCKS_PER_MODULE);
                    for b in 0..self.modules[m].blocks.len() {
                        let block = self.modules[m].blocks[b];
                        let (h, first) = self.conv_bn_relu_at(&x, block.first, app)?;
                        let (h, second) = self.conv_bn_relu_at(&h, block.second, app)?;
                        x = add(&x, &h)?;
                        caches.push(BlockCache { first, second });
                    }
                    tape.push(StageCache::Module(caches));
                    x
                }
                Stage::Reconstruct => {
                    let y = self.conv(&x, self.reconstruct)?;
                    tape.push(StageCache::Reconstruct(x));
                    y
                }
            };
        }
        self.tape = Some(tape);
        Ok(x)
    }

    fn conv_bn_relu(&mut self, x: &Tensor4<T>, ids: ConvBn) -> Result<(Tensor4<T>, ConvBnCache<T>)> {
        self.conv_bn_relu_at(x, ids, 0)
    }

    fn conv_bn_relu_at(&mut self, x: &Tensor4<T>, ids: ConvBn, app: usize) -> Result<(Tensor4<T>, ConvBnCache<T>)> {
        let z = self.conv(x, ids.conv)?;
        let (normalized, bn) = match self.app_stats.get_mut(&(ids.bn, app)) {
            Some(stats) => {
                let params = self.store.bn_mut(ids.bn);
                core::mem::swap(&mut params.running_mean, &mut stats.mean);
                core::mem::swap(&mut params.running_var, &mut stats.var);
                let out = batchnorm(&z, params);
                core::mem::swap(&mut params.running_mean, &mut stats.mean);
                core::mem::swap(&mut params.running_var, &mut stats.var);
                out?
            }
            None => batchnorm(&z, self.store.bn_mut(ids.bn))?,
        };
        let y = relu(&normalized);
        Ok((
            y,
            ConvBnCache {
                input: x.clone(),
                bn,
                normalized,
            },
        ))
    }

    /// Eval-mode forward pass using running statistics. Read-only, so a model
    /// can serve several inference workers at once.
    pub fn infer(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(batch)?;
        let cbr = |x: &Tensor4<T>, ids: ConvBn, app: usize| -> Result<Tensor4<T>> {
            let z = self.conv(x, ids.conv)?;
            let shared = self.store.bn(ids.bn);
            let normalized = match self.app_stats.get(&(ids.bn, app)) {
                Some(stats) => {
                    let mut params = shared.clone();
                    params.running_mean.clone_from(&stats.mean);
                    params.running_var.clone_from(&stats.var);
                    batchnorm_inference(&z, &params)?
                }
                None => batchnorm_inference(&z, shared)?,
            };
            Ok(relu(&normalized))
        };
        let mut x = batch.clone();
        x.clear_grad();
        for stage in &self.plan {
            x = match *stage {
                Stage::Stem => cbr(&x, self.stem, 0)?,
                Stage::Pool => maxpool2(&x)?.0,
                Stage::Module(m, app) => {
                    for block in &self.modules[m].blocks {
                        let h = cbr(&cbr(&x, block.first, app)?, block.second, app)?;
                        x = add(&x, &h)?;
                    }
                    x
                }
                Stage::Reconstruct => self.conv(&x, self.reconstruct)?,
            };
        }
        Ok(x)
    }

    /// Back-propagates `out_grad` through the last train-mode forward pass,
    /// adding into the gradient buffers of the store. Shared entries receive
    /// the sum over all of their applications. Returns the input gradient.
    pub fn backward(&mut self, out_grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = self.tape.take().ok_or(Error::BackwardWithoutForward)?;
        let mut g = out_grad.clone();
        g.clear_grad();
        for i in (0..self.plan.len()).rev() {
            let cache = tape.pop().expect("one cache per stage");
            g = match (self.plan[i], cache) {
                (Stage::Reconstruct, StageCache::Reconstruct(input)) => {
                    conv2d_backward(&input, self.store.conv_mut(self.reconstruct), &g)?
                }
                (Stage::Module(m, _), StageCache::Module(caches)) => {
                    for (b, cache) in caches.iter().enumerate().rev() {
                        let block = self.modules[m].blocks[b];
                        let gh = self.conv_bn_relu_backward(&cache.second, block.second, &g)?;
                        let gh = self.conv_bn_relu_backward(&cache.first, block.first, &gh)?;
                        // identity shortcut: the block input receives g directly
                        g = add(&g, &gh)?;
                    }
                    g
                }
                (Stage::Pool, StageCache::Pool(idx)) => maxpool2_backward(&idx, &g)?,
                (Stage::Stem, StageCache::Stem(cache)) => self.conv_bn_relu_backward(&cache, self.stem, &g)?,
                _ => unreachable!("tape out of sync with plan"),
            };
        }
        Ok(g)
    }

    fn conv_bn_relu_backward(&mut self, cache: &ConvBnCache<T>, ids: ConvBn, g: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = relu_backward(&cache.normalized, g)?;
        let g = batchnorm_backward(&cache.bn, self.store.bn_mut(ids.bn), &g)?;
        conv2d_backward(&cache.input, self.store.conv_mut(ids.conv), &g)
    }

    /// Running statistics of every application after the first, named
    /// `<bn entry>@<application>` with applications counted from 1.
    pub fn application_stats(&self) -> Vec<(String, &RunningStats<T>)> {
        self.app_stats
            .iter()
            .map(|((id, app), st)| (format!("{}@{}", self.store.name(*id), app + 1), st))
            .collect()
    }

    /// Replaces the statistics named as in [`Self::application_stats`].
    pub fn set_application_stats(&mut self, name: &str, stats: RunningStats<T>) -> Result<()> {
        let key = name
            .rsplit_once('@')
            .and_then(|(entry, app)| Some((self.store.find(entry)?, app.parse::<usize>().ok()?.checked_sub(1)?)));
        let slot = key.and_then(|k| self.app_stats.get_mut(&k));
        match slot {
            Some(slot) if slot.mean.len() == stats.mean.len() && slot.var.len() == stats.var.len() => {
                *slot = stats;
                Ok(())
            }
            Some(_) => Err(Error::ShapeMismatch {
                op: "set_application_stats",
                detail: format!("channel count differs for `{name}`"),
            }),
            None => Err(Error::InvalidConfig(format!(
                "no application statistics named `{name}`"
            ))),
        }
    }

    /// Names of the store entries owned by residual module `index` (1-based).
    pub fn module_entries(&self, index: usize) -> Vec<String> {
        let prefix = format!("module{index}.");
        self.store
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(n, _)| String::from(n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, h: usize, w: usize, salt: usize) -> Tensor4<f32> {
        Tensor4::from_fn(Shape4::new(n, 3, h, w), |b, c, y, x| {
            (((b + salt) * 131 + c * 71 + y * 13 + x * 7) % 29) as f32 / 29.0
        })
    }

    #[test]
    fn conv_weight_counts_match_closed_form() {
        let count = |arch| {
            Model::<f32>::build(ModelSpec::new(arch), 0)
                .unwrap()
                .count_parameters(CountMode::ConvWeights)
        };
        assert_eq!(count(Arch::DrResNet), 9 * 3 * 16 + 12 * 9 * 16 * 16 + 16);
        assert_eq!(count(Arch::DrResNet), 28_096);
        assert_eq!(count(Arch::RResNet), 28_096);
        assert_eq!(count(Arch::ResNet14), 28_096);
        assert_eq!(count(Arch::ResNet20), 41_920);
        assert_eq!(count(Arch::ResNet26), 55_744);
    }

    #[test]
    fn all_learnable_adds_bias_and_affine() {
        let m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 0).unwrap();
        // 13 BN layers with gamma+beta of 16, plus the reconstruction bias
        assert_eq!(m.count_parameters(CountMode::AllLearnable), 28_096 + 13 * 32 + 1);
    }

    #[test]
    fn layer_counts_and_depth() {
        let r14 = Model::<f32>::build(ModelSpec::new(Arch::ResNet14), 0).unwrap();
        assert_eq!(r14.conv_layers(), 14);
        assert_eq!(r14.spec().depth(), 14);
        let dr = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 0).unwrap();
        assert_eq!(dr.conv_layers(), 14);
        assert_eq!(dr.spec().depth(), 26);
        dr.infer(&input(1, 16, 16, 0)).unwrap();
        assert_eq!(dr.conv_applications(), 26);
    }

    #[test]
    fn output_shape_is_quarter_resolution() {
        let m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 1).unwrap();
        let out = m.infer(&input(1, 64, 64, 0)).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 1, 16, 16));
        let out = m.infer(&input(2, 8, 12, 0)).unwrap();
        assert_eq!(out.shape(), Shape4::new(2, 1, 2, 3));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = Model::<f32>::build(ModelSpec::new(Arch::ResNet14), 1).unwrap();
        assert!(matches!(m.infer(&input(1, 10, 8, 0)), Err(Error::NotDivisible { .. })));
        let gray = Tensor4::<f32>::zeros(Shape4::new(1, 1, 8, 8));
        assert!(matches!(m.infer(&gray), Err(Error::ShapeMismatch { .. })));
        let g = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 2));
        assert_eq!(m.backward(&g).unwrap_err(), Error::BackwardWithoutForward);
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!("resnet50".parse::<Arch>().is_err());
        assert_eq!("dr_resnet".parse::<Arch>().unwrap(), Arch::DrResNet);
        assert!(ModelSpec {
            recursion_depth: 0,
            ..ModelSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn identical_images_give_identical_maps() {
        let m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 3).unwrap();
        let one = input(1, 16, 16, 5);
        let out = m.infer(&Tensor4::stack(&[one.clone(), one]).unwrap()).unwrap();
        assert_eq!(out.sample(0), out.sample(1));
    }

    #[test]
    fn depth_one_recursion_matches_resnet14() {
        let spec = ModelSpec {
            arch: Arch::DrResNet,
            recursion_depth: 1,
            ..ModelSpec::default()
        };
        let mut dr = Model::<f32>::build(spec, 9).unwrap();
        let mut r14 = Model::<f32>::build(ModelSpec::new(Arch::ResNet14), 9).unwrap();
        assert_eq!(dr.store(), r14.store());
        let x = input(2, 16, 16, 1);
        let a = dr.forward(&x, NormMode::Train).unwrap();
        let b = r14.forward(&x, NormMode::Train).unwrap();
        assert_eq!(a, b);
        let g = a.map(|v| v * 0.5 - 0.1);
        dr.backward(&g).unwrap();
        r14.backward(&g).unwrap();
        assert_eq!(dr.store(), r14.store());
    }

    #[test]
    fn zero_output_grad_gives_zero_parameter_grads() {
        let mut m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 2).unwrap();
        let out = m.forward(&input(2, 8, 8, 0), NormMode::Train).unwrap();
        m.backward(&Tensor4::zeros(out.shape())).unwrap();
        for (name, _, t) in m.store().learnables() {
            assert!(t.grad().unwrap().iter().all(|&g| g == 0.0), "{name}");
        }
    }

    #[test]
    fn shared_module_has_single_entry_set() {
        let m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 0).unwrap();
        assert_eq!(m.module_entries(2).len(), 12);
        assert!(m.module_entries(3).is_empty());
        let r26 = Model::<f32>::build(ModelSpec::new(Arch::ResNet26), 0).unwrap();
        assert_eq!(r26.module_entries(4).len(), 12);
    }

    #[test]
    fn mutating_shared_weight_changes_output() {
        let mut m = Model::<f32>::build(ModelSpec::new(Arch::DrResNet), 4).unwrap();
        let x = input(1, 16, 16, 2);
        let before = m.infer(&x).unwrap();
        if let Some(Param::Conv(c)) = m.store_mut().by_name_mut("module2.block2.conv1") {
            c.weight.data_mut()[0] += 0.5;
        }
        assert_ne!(m.infer(&x).unwrap(), before);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::build(ModelSpec::default(), 11).unwrap();
        let b = Model::<f32>::build(ModelSpec::default(), 11).unwrap();
        let c = Model::<f32>::build(ModelSpec::default(), 12).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store(), c.store());
    }
}

use alloc::string::String;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{BatchNormParams, ConvParams, NormMode, Tensor4};

/// Handle to one entry of a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub enum Param<T = f32> {
    Conv(ConvParams<T>),
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> Param<T> {
    fn cast<U: Scalar>(&self) -> Param<U> {
        match self {
            Param::Conv(c) => Param::Conv(ConvParams {
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(|b| b.cast()),
                padding: c.padding,
            }),
            Param::BatchNorm(b) => Param::BatchNorm(b.cast()),
        }
    }
}

/// Role of a learnable tensor inside its entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LearnableKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl LearnableKind {
    pub fn suffix(self) -> &'static str {
        match self {
            Self::Weight => "weight",
            Self::Bias => "bias",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
        }
    }

    /// BN scale and shift are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, Self::Weight | Self::Bias)
    }
}

pub struct Learnable<'a, T> {
    pub entry: &'a str,
    pub kind: LearnableKind,
    pub tensor: &'a mut Tensor4<T>,
}

/// Named owner entries for every parameter of a model. A weight-shared module
/// has exactly one set of entries no matter how often it is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T = f32> {
    names: Vec<String>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
        }
    }
}

impl<T: Scalar> ParameterStore<T> {
    /// Adds an entry. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter entry `{name}`");
        self.names.push(name);
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.find(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub(crate) fn conv(&self, id: ParamId) -> &ConvParams<T> {
        match &self.params[id.0] {
            Param::Conv(c) => c,
            Param::BatchNorm(_) => unreachable!("entry {} is not a convolution", self.names[id.0]),
        }
    }

    pub(crate) fn conv_mut(&mut self, id: ParamId) -> &mut ConvParams<T> {
        match &mut self.params[id.0] {
            Param::Conv(c) => c,
            Param::BatchNorm(_) => unreachable!("entry is not a convolution"),
        }
    }

    pub(crate) fn bn(&self, id: ParamId) -> &BatchNormParams<T> {
        match &self.params[id.0] {
            Param::BatchNorm(b) => b,
            Param::Conv(_) => unreachable!("entry {} is not a batch norm", self.names[id.0]),
        }
    }

    pub(crate) fn bn_mut(&mut self, id: ParamId) -> &mut BatchNormParams<T> {
        match &mut self.params[id.0] {
            Param::BatchNorm(b) => b,
            Param::Conv(_) => unreachable!("entry is not a batch norm"),
        }
    }

    pub(crate) fn set_norm_mode(&mut self, mode: NormMode) {
        for p in &mut self.params {
            if let Param::BatchNorm(b) = p {
                b.mode = mode;
            }
        }
    }

    /// Every learnable tensor in a fixed order: entries in insertion order,
    /// weight before bias, gamma before beta.
    pub fn learnables_mut(&mut self) -> Vec<Learnable<'_, T>> {
        let mut out = Vec::new();
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            match p {
                Param::Conv(c) => {
                    out.push(Learnable {
                        entry: name,
                        kind: LearnableKind::Weight,
                        tensor: &mut c.weight,
                    });
                    if let Some(b) = c.bias.as_mut() {
                        out.push(Learnable {
                            entry: name,
                            kind: LearnableKind::Bias,
                            tensor: b,
                        });
                    }
                }
                Param::BatchNorm(b) => {
                    out.push(Learnable {
                        entry: name,
                        kind: LearnableKind::Gamma,
                        tensor: &mut b.gamma,
                    });
                    out.push(Learnable {
                        entry: name,
                        kind: LearnableKind::Beta,
                        tensor: &mut b.beta,
                    });
                }
            }
        }
        out
    }

    /// Same order as [`Self::learnables_mut`].
    pub fn learnables(&self) -> Vec<(&str, LearnableKind, &Tensor4<T>)> {
        let mut out = Vec::new();
        for (name, p) in self.iter() {
            match p {
                Param::Conv(c) => {
                    out.push((name, LearnableKind::Weight, &c.weight));
                    if let Some(b) = &c.bias {
                        out.push((name, LearnableKind::Bias, b));
                    }
                }
                Param::BatchNorm(b) => {
                    out.push((name, LearnableKind::Gamma, &b.gamma));
                    out.push((name, LearnableKind::Beta, &b.beta));
                }
            }
        }
        out
    }

    /// All learnable values concatenated in [`Self::learnables`] order.
    pub fn flat_values(&self) -> Vec<T> {
        self.learnables()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().copied())
            .collect()
    }

    /// All gradients in [`Self::learnables`] order; missing buffers read as zero.
    pub fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (_, _, t) in self.learnables() {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(core::iter::repeat_n(T::zero(), t.len())),
            }
        }
        out
    }

    /// Overwrites learnable values from a [`Self::flat_values`] layout.
    pub fn load_flat_values(&mut self, values: &[T]) {
        let mut rest = values;
        for l in self.learnables_mut() {
            let (head, tail) = rest.split_at(l.tensor.len());
            l.tensor.data_mut().copy_from_slice(head);
            rest = tail;
        }
        assert!(rest.is_empty(), "flat value count does not match the store");
    }

    pub fn clear_grads(&mut self) {
        for l in self.learnables_mut() {
            l.tensor.clear_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }
}

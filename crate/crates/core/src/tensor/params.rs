use rand::Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Role of a learnable tensor; drives the parameter-counting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    LinearWeight,
    LinearBias,
    ConvWeight,
    ConvBias,
    /// The 2->1 pointwise convolution that produces a spatial attention map.
    AttentionMapConv,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Weights and biases of linear/convolution layers. Normalization
    /// affines and the attention-map convolution are excluded.
    pub fn counts_in_layer_convention(self) -> bool {
        !matches!(self, Self::AttentionMapConv | Self::NormGain | Self::NormBias)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param { name, kind, value });
        Ok(self.params.len() - 1)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape as a learnable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Same as [`bind`](Self::bind) but as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }
}

/// Uniform in `+-sqrt(1/fan_in)`.
pub(crate) fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound))).collect();
    Tensor::from_parts(shape, data)
}

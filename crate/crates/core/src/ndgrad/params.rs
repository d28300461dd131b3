use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Role of a learnable tensor; decides weight decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution, linear and recurrent weight matrices.
    Weight,
    Bias,
    /// Scale/shift of batch and layer normalization.
    Norm,
    /// Unconstrained parameter behind a GeM pooling exponent.
    GemExponent,
    /// Relative-position bias table of an attention unit.
    PositionBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Named learnable tensors with paired gradients, plus non-learnable
/// buffers (running statistics). Iteration follows insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad, kind });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_buffer", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != g.shape() {
            return Err(Error::shape("accumulate_grad", format!("{name}: {:?} vs {:?}", p.grad.shape(), g.shape())));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    /// Converts every value, gradient and buffer to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), grad: p.grad.cast(), kind: p.kind }))
                .collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Normal samples with `std`, redrawn outside two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break lit(z * std);
        }
    })
}

/// He initialization using fan-out, for conv kernels `[cout, cin/groups, kh, kw]`.
pub fn he_fan_out<T: Scalar, R: Rng + ?Sized>(shape: &[usize], groups: usize, rng: &mut R) -> Tensor<T> {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = (shape[0] * receptive / groups.max(1)).max(1);
    let std = (2.0 / fan_out as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

//! Trainable parameters and the trait models use to expose them.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Variable`], used to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor with an optional gradient slot.
#[derive(Debug)]
pub struct Variable<T: Scalar = f32> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    trainable: bool,
    key: ParamKey,
}

impl<T: Scalar> Clone for Variable<T> {
    /// Clones get a fresh key so gradients never alias between copies.
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
            key: ParamKey::fresh(),
        }
    }
}

impl<T: Scalar> Variable<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            key: ParamKey::fresh(),
        }
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)));
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        self.value.expect_same_shape("set_value", &value)?;
        self.value = value;
        Ok(())
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.data_mut().iter_mut().for_each(|x| *x = T::zero()),
            None => self.grad = Some(Tensor::zeros(self.value.shape())),
        }
    }

    /// Adds `delta` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &Tensor<T>) -> Result<()> {
        self.value.expect_same_shape("accumulate_grad", delta)?;
        match &mut self.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub(crate) fn grad_data(&self) -> Result<&[T]> {
        self.grad
            .as_ref()
            .map(|g| g.data())
            .ok_or_else(|| Error::Contract(format!("parameter `{}` has no gradient", self.name)))
    }
}

/// Anything that owns trainable [`Variable`]s in a stable order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Variable<T>>;
    fn params_mut(&mut self) -> Vec<&mut Variable<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }

    /// SHA-256 over names, shapes and values; identical iff parameters are bit-identical.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            for &d in p.value().shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value().data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl<T: Scalar> Parameterized<T> for Variable<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        vec![self]
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        vec![self]
    }
}

impl<T: Scalar> Parameterized<T> for Vec<Variable<T>> {
    fn params(&self) -> Vec<&Variable<T>> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        self.iter_mut().collect()
    }
}

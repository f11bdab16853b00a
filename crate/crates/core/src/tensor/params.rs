use std::collections::BTreeMap;

use super::{Gradients, Tensor, TensorError};

/// Named trainable arrays, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    arrays: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(TensorError::Precondition(format!("duplicate parameter name {name}")));
        }
        self.arrays.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.arrays.values_mut().for_each(Tensor::zero_grad);
    }

    /// Writes gradients from a backward pass into each parameter's grad buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), TensorError> {
        for (name, g) in grads.params() {
            let t = self
                .arrays
                .get_mut(name)
                .ok_or_else(|| TensorError::Precondition(format!("gradient for unknown parameter {name}")))?;
            t.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    /// True when both sets hold the same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

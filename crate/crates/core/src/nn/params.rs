use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Named tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, trainable });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.entries[self.position(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = self.position(name)?;
        Ok(&mut self.entries[i].tensor)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].tensor
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform `±bound` tensor drawn from the stream labelled `name`.
pub fn uniform<S: Scalar>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<S> {
    let mut r = rng::stream(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if bound > 0.0 { S::lit(r.random_range(-bound..bound)) } else { S::zero() }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

//! Named parameter storage.
//!
//! All weights, biases, and non-trainable buffers of a model live in one
//! flat [`ParamStore`] keyed by hierarchical dot-separated names
//! (`stages.2.blocks.1.ffn.expand.w`). The store is the single source of
//! truth for checkpointing, optimizer state pairing, and parameter
//! counting; layer structs hold only [`ParamId`] handles into it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Handle to one entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named tensor: a trainable weight or a persistent buffer
/// (e.g. batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Ordered, name-indexed collection of parameters. Insertion order is
/// deterministic (model construction order) and is the canonical order
/// for checkpoints and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry<S>> {
        self.entries.iter()
    }

    /// Total element count of trainable entries.
    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    /// Convert every tensor to another element type (used to run
    /// finite-difference checks in f64 on an f32-built model).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.tensor.cast::<T>(), e.trainable)
                .expect("names already unique");
        }
        out
    }
}

/// Builder that pairs a store with an RNG so layer constructors can
/// allocate initialized parameters in one deterministic pass.
pub struct ParamBuilder<'a, S: Scalar> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut Rng,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut Rng) -> Self {
        ParamBuilder { store, rng }
    }

    /// Trainable weight, truncated-normal init (std 0.02, cut at 2 std).
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(self.rng.trunc_normal(0.02)))
            .collect();
        self.store.add(name, Tensor::from_vec(shape, data)?, true)
    }

    /// Trainable zeros (biases, norm shifts).
    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape), true)
    }

    /// Trainable ones (norm scales).
    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, S::ONE), true)
    }

    /// Non-trainable buffer of zeros (running means).
    pub fn buffer_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape), false)
    }

    /// Non-trainable buffer of ones (running variances).
    pub fn buffer_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, S::ONE), false)
    }
}

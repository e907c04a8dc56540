//! Named trainable arrays and gradient accumulation.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph};
use crate::optim::AdaDeltaSlot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    /// Shared with any graph that bound it; replaced copy-on-write by the optimizer.
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
    pub slot: Option<AdaDeltaSlot<T>>,
}

/// Every weight of a model, keyed by a dotted name. Iteration order is the
/// lexicographic name order, which fixes checkpoint layout and update order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                trainable: true,
                slot: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Mutable access to a parameter's values (clones if a graph still shares them).
    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Bitwise equality of names, shapes, and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Per-parameter gradient sums gathered from one or more backward passes.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer<T> {
    sums: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn new() -> Self {
        Self { sums: BTreeMap::new() }
    }

    /// Add the gradients of every parameter bound in `graph`.
    pub fn accumulate(&mut self, graph: &Graph<'_, T>, grads: &Gradients<T>) {
        for (name, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                self.add(name, g);
            }
        }
    }

    pub fn add(&mut self, name: &str, g: &Tensor<T>) {
        match self.sums.get_mut(name) {
            Some(t) => {
                for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.sums.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Fold another buffer in; callers merge in a fixed order for reproducibility.
    pub fn merge(&mut self, other: &GradBuffer<T>) {
        for (k, g) in &other.sums {
            self.add(k, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.sums.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.sums.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.sums.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> T {
        self.sums
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}

//! Named parameter storage, per-step graph bindings and seeded initialisation.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from parameter name to value. Order is insertion order and is
/// the order used by checkpoints and the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sum of element counts of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Binds every parameter as a gradient-tracking leaf.
    pub fn bind(&self) -> Bindings<T> {
        self.bind_with(true)
    }

    /// Binds every parameter as a constant (inference: no graph is kept).
    pub fn bind_frozen(&self) -> Bindings<T> {
        self.bind_with(false)
    }

    fn bind_with(&self, requires_grad: bool) -> Bindings<T> {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Var::leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Order-sensitive checksum over names and values.
    pub fn checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = super::Fnv64::default();
        for (k, v) in &self.params {
            h.write(k.as_bytes());
            h.write_u64(v.checksum());
        }
        h.finish()
    }
}

/// Parameters bound into the graph for one forward pass.
#[derive(Clone)]
pub struct Bindings<T: Element> {
    vars: IndexMap<String, Var<T>>,
}

impl<T: Element> Bindings<T> {
    /// Bindings from explicit `(name, var)` pairs, e.g. leaves owned by a
    /// gradient checker.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Bindings {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradients in store order; parameters not reached by the graph get zeros.
    pub fn grads(&self) -> Vec<(String, Tensor<T>)> {
        self.vars
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())),
                )
            })
            .collect()
    }
}

/// Seeded parameter initialiser.
#[derive(Debug, Clone)]
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.rng.gen_range(-bound..=bound)))
    }

    /// Variance-preserving uniform init, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
    pub fn fan_in<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (3.0 / fan_in.max(1) as f64).sqrt())
    }
}

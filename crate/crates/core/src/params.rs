//! Named parameter storage.
//!
//! Parameters live outside any tape as an ordered list of named tensors. Each
//! forward pass binds the whole set onto a fresh [`Graph`], which yields one
//! parameter leaf per entry; gradients are looked up through the same binding.

use std::collections::HashMap;

use crate::error::{CastError, Result};
use crate::tensor::{GradientMap, Graph, Real, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CastError::config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a parameter leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        Bound { set: self, vars }
    }

    /// Registers every tensor as a constant leaf (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect();
        Bound { set: self, vars }
    }

    /// Names existing leaves, one per entry in parameter order.
    pub fn attach(&self, vars: &[Var]) -> Result<Bound<'_, T>> {
        if vars.len() != self.entries.len() {
            return Err(CastError::config(format!("{} leaves for {} parameters", vars.len(), self.entries.len())));
        }
        Ok(Bound { set: self, vars: vars.to_vec() })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors().zip(other.tensors()).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }
}

/// A [`ParamSet`] bound onto one graph.
pub struct Bound<'a, T: Real> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| CastError::config(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-entry gradients in parameter order.
    pub fn gradients(&self, grads: &GradientMap<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.set.tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies tensors of `other` into `self`, replacing same-named entries.
    pub fn extend_from(&mut self, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.insert(name, t.clone());
        }
    }

    /// Keeps only tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if keep(name) {
                out.insert(name, t.clone());
            }
        }
        out
    }

    /// All values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Binding {
            vars,
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Binding {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape()));
        }
        out
    }
}

/// Tape variables for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Gradients in the same order and shapes as the bound set.
    pub fn gradients(&self, params: &ParamSet, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for ((name, t), &v) in params.iter().zip(&self.vars) {
            let data = grads.get_or_zeros(v, t.len());
            out.insert(
                name,
                Tensor::new(t.shape().to_vec(), data).expect("same shape"),
            );
        }
        out
    }
}

//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters keyed by dotted names such as `rgb.block1.conv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for every parameter of a [`ParamStore`], valid for one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant leaf, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = false;
                (name.clone(), tape.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients computed on `tape` back onto the stored tensors.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad {
                t.grad = None;
                continue;
            }
            t.grad = bound
                .vars
                .get(name)
                .and_then(|&v| tape.grad(v))
                .map(<[T]>::to_vec)
                .or_else(|| Some(vec![T::zero(); t.numel()]));
        }
    }

    /// Parameters that currently carry a gradient, for the optimizer.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .filter(|(_, t)| t.requires_grad)
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

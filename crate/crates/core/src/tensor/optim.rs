//! SGD with momentum.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `v <- momentum * v + grad; p <- p - lr * v`, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter in place and clears its gradient.
    pub fn step<'a, I>(&mut self, params: I, lr: T) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::usage(format!("parameter {name} has no gradient")));
        }
        for (name, p) in params {
            let grad = p.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((vi, &gi), pi) in v.iter_mut().zip(&grad).zip(p.values_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

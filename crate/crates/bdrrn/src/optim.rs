//! Named-parameter registry and the Adam update rule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with a stable name and a per-parameter learning-rate
/// multiplier (the final layer trains at 0.1x the base rate).
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub lr_scale: f64,
}

impl Parameter {
    pub fn new(mut value: Tensor, lr_scale: f64) -> Self {
        assert!(lr_scale > 0.0, "lr_scale must be positive");
        value.requires_grad = true;
        Parameter { value, lr_scale }
    }
}

/// Uniquely named parameters; iteration order is name order, so every
/// consumer (Adam, checkpoints) is independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: BTreeMap<String, Parameter>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Parameter) {
        let prev = self.params.insert(name.to_string(), param);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all entries. Shared use sites reference
    /// one entry, so sharing never double-counts.
    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.value.zero_grad();
        }
    }
}

/// Bias-corrected Adam over a parameter registry.
#[derive(Debug, Clone)]
pub struct Adam {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step counter; strictly increases by 1 per update.
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(base_lr: f64) -> Self {
        Adam {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every registered parameter, in place. Effective rate
    /// per parameter is `base_lr * lr_scale`. Errors if any parameter has
    /// no gradient.
    pub fn step(&mut self, registry: &mut ParamRegistry) -> Result<()> {
        for (name, p) in registry.iter() {
            if p.value.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in registry.iter_mut() {
            let grad = p.value.grad.as_ref().unwrap().clone();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let lr = self.base_lr * p.lr_scale;
            for ((mi, vi), (w, g)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.value.data_mut().iter_mut().zip(&grad))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

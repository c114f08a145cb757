use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{DehazeError, Result};

/// Whether a parameter is updated by the optimizer or only carried along
/// (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    kind: ParamKind,
    value: Tensor,
}

/// Named parameter tensors of one network, held at `f32` precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rounding it to `f32` storage precision.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, mut value: Tensor) {
        value.round_to_f32();
        self.entries.insert(name.into(), Entry { kind, value });
    }

    /// Gaussian-initialized trainable tensor.
    pub fn insert_gaussian<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("standard deviation is finite and positive");
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = normal.sample(rng);
        }
        self.insert(name, ParamKind::Trainable, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| DehazeError::State(format!("no parameter named {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces an existing tensor, keeping its kind and requiring the same shape.
    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DehazeError::State(format!("no parameter named {name}")))?;
        entry.value.same_shape(&value, name)?;
        value.round_to_f32();
        entry.value = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.kind, &e.value))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Trainable)
            .map(|(k, _, t)| (k, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Scalar count of every tensor whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, kind, _)| k.starts_with(prefix) && *kind == ParamKind::Trainable)
            .map(|(_, _, t)| t.len())
            .sum()
    }
}

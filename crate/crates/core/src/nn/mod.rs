//! Inception-style classifier construction, inference, and SGD training.

mod arch;
mod model;
mod schedule;
mod train;

pub use arch::{ArchSpec, HeadSpec, InceptionBlockSpec};
pub use model::{EvalOutput, ModelGraph, TapeForward};
pub use schedule::{lr_at, LrSchedule};
pub use train::{sgd_train, EpochMetrics, LossSpec, TrainConfig, TrainReport};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count across all tensors.
    pub fn total_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Byte-exact equality of every tensor payload.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(name, t)| {
                other.params.get(name).is_some_and(|o| t.bit_eq(o))
            })
    }
}

/// Deep copy of the current parameters, to be held as the rewind target.
/// Later training never touches the snapshot.
pub fn snapshot_params(params: &ParamStore) -> ParamStore {
    params.clone()
}

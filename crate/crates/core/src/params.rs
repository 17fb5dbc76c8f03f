//! Named parameter storage. Keys are dotted module paths
//! (`features.fuse_low.conv.weight`); ordering is lexicographic everywhere so
//! checkpoints and update loops are deterministic.

use std::collections::BTreeMap;

use crate::attention::FusionKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::AblationFlags;

/// Bookkeeping carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreMeta {
    pub stage: u8,
    pub iteration: u64,
    pub ablation: AblationFlags,
    pub fusion: FusionKind,
}

impl Default for StoreMeta {
    fn default() -> Self {
        Self {
            stage: 1,
            iteration: 0,
            ablation: AblationFlags::default(),
            fusion: FusionKind::Mutual,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    pub meta: StoreMeta,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            meta: StoreMeta::default(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Removes every parameter under `prefix`; returns the removed names.
    pub fn remove_prefix(&mut self, prefix: &str) -> Vec<String> {
        let doomed: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        for name in &doomed {
            self.params.remove(name);
        }
        doomed
    }

    /// Copies values for every key present in both stores; returns
    /// `(adopted, missing_here, extra_in_other)` name lists.
    pub fn adopt_from(&mut self, other: &ParameterStore<T>) -> (Vec<String>, Vec<String>, Vec<String>) {
        let mut adopted = Vec::new();
        let mut missing = Vec::new();
        for (name, value) in &other.params {
            match self.params.get_mut(name) {
                Some(slot) if slot.shape() == value.shape() => {
                    *slot = value.clone();
                    adopted.push(name.clone());
                }
                _ => missing.push(name.clone()),
            }
        }
        let extra: Vec<String> = self
            .params
            .keys()
            .filter(|n| !other.params.contains_key(*n))
            .cloned()
            .collect();
        (adopted, missing, extra)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Element-wise precision conversion; metadata carried over.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
            meta: self.meta.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_removal_and_missing_param_error() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a.w", Tensor::zeros(vec![2]));
        store.insert("attention.fuse.conv.weight", Tensor::zeros(vec![2]));
        store.insert("attention.fuse.conv.bias", Tensor::zeros(vec![2]));
        let removed = store.remove_prefix("attention.");
        assert_eq!(removed.len(), 2);
        assert!(store.contains("a.w"));
        assert!(matches!(
            store.get("attention.fuse.conv.weight"),
            Err(Error::MissingParam(_))
        ));
    }
}

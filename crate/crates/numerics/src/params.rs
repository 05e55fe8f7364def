use indexmap::{IndexMap, IndexSet};
use sha2::{Digest, Sha256};

use crate::error::{NumericsError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Named parameters in insertion order, with a per-name frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Tensor<T>>,
    frozen: IndexSet<String>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            frozen: IndexSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    /// Mutable access; refuses frozen parameters.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if self.frozen.contains(name) {
            return None;
        }
        self.params.get_mut(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(NumericsError::UnknownParameter(name.to_string()));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for k in self.params.keys() {
            self.frozen.insert(k.clone());
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn all_frozen(&self) -> bool {
        self.params.keys().all(|k| self.frozen.contains(k))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(|k| !self.frozen.contains(*k))
            .map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, in store order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    pub(crate) fn set_unchecked(&mut self, name: &str, tensor: Tensor<T>) {
        self.params.insert(name.to_string(), tensor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_refuse_mutation() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        s.freeze("w").unwrap();
        assert!(s.get_mut("w").is_none());
        assert_eq!(s.trainable_names().count(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        let before = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = 1e-30;
        assert_ne!(before, s.checksum());
    }
}

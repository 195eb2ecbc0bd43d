//! Named parameter collections.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Provenance attached to a store: which configuration it was built for and
/// the seed its weights were drawn from.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StoreMeta {
    pub config_hash: String,
    pub init_seed: u64,
}

/// A map from parameter name to a shaped `f64` array.
///
/// Names are dotted paths (`encoder.blocks.0.attn.qkv.weight`). Iteration is
/// in lexicographic name order, which keeps hashing and serialization stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
    pub meta: StoreMeta,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape(format!("`{name}` is not a matrix")))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape(format!("`{name}` is not a vector")))
    }

    pub fn matrix_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        self.get_mut(name)?
            .view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape(format!("`{name}` is not a matrix")))
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, f64>> {
        self.get_mut(name)?
            .view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape(format!("`{name}` is not a vector")))
    }

    /// Add `value` into the entry `name`, creating it if absent.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, value: ndarray::Array<f64, D>) {
        let value = value.into_dyn();
        match self.tensors.get_mut(name) {
            Some(t) => *t += &value,
            None => {
                self.tensors.insert(name.to_string(), value);
            }
        }
    }

    /// A store with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// The subset of parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "stores hold {} and {} parameters",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Largest absolute elementwise difference between matching parameters.
    pub fn max_abs_diff(&self, other: &ParameterStore) -> Result<f64> {
        self.check_compatible(other)?;
        let mut worst = 0.0f64;
        for (name, t) in &self.tensors {
            let o = &other.tensors[name];
            for (a, b) in t.iter().zip(o.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

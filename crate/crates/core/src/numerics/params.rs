use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, fill_gaussian, rng};
use crate::numerics::{Scalar, Tensor};

/// Named parameter tensors in canonical (lexicographic) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
    pub rng_seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        Self { entries: BTreeMap::new(), rng_seed }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Gaussian-initialised tensor; the stream is derived from the store seed
    /// and the parameter name so insertion order does not matter.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let mut t = Tensor::zeros(shape)?;
        let mut r = rng(derive_seed(self.rng_seed, name_hash(name)));
        fill_gaussian(t.data_mut(), &mut r, std);
        self.insert(name, t)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::c(value))?)
    }

    /// Copies every entry of `other` into this store.
    pub fn merge(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries, rng_seed: self.rng_seed }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    /// SHA-256 over names, shapes and little-endian `f32` payloads.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.entries {
            h.update(k.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            rng_seed: self.rng_seed,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f32>::new(5);
        a.init_normal("x", &[3], 1.0).unwrap();
        a.init_normal("y", &[3], 1.0).unwrap();
        let mut b = ParamStore::<f32>::new(5);
        b.init_normal("y", &[3], 1.0).unwrap();
        b.init_normal("x", &[3], 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.names().cloned().collect::<Vec<_>>(), vec!["x", "y"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParamStore::<f32>::new(0);
        a.init_const("x", &[1], 0.0).unwrap();
        assert!(a.init_const("x", &[1], 0.0).is_err());
    }
}

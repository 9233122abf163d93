use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PARAMS_FORMAT: &str = "cfdialog-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    has_grad: bool,
}

/// Named parameters with one gradient slot each.
///
/// Iteration order is insertion order, which keeps optimizer updates and
/// serialized output deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    slots: IndexMap<String, Slot>,
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(
            name,
            Slot {
                value,
                grad,
                has_grad: false,
            },
        );
        Ok(())
    }

    /// Insert a parameter drawn uniformly from ±1/√fan_in.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots
            .get(name)
            .and_then(|s| s.has_grad.then_some(&s.grad))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Add the gradients of every parameter of this set found in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (name, slot) in self.slots.iter_mut() {
            if let Some(g) = grads.by_name.get(name) {
                slot.grad.add_assign(g);
                slot.has_grad = true;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            slot.has_grad = false;
        }
    }

    pub(crate) fn slots_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor, bool)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, &s.grad, s.has_grad))
    }

    /// Copy values (not gradients) from `other`; names and shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Contract(format!("source lacks parameter `{name}`")))?;
            if src.shape() != slot.value.shape() {
                return Err(Error::shape("copy_values_from", format!("`{name}` shape differs")));
            }
            slot.value = src.clone();
        }
        Ok(())
    }

    fn to_file(&self) -> ParamFile {
        ParamFile {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            params: self
                .slots
                .iter()
                .map(|(name, s)| ParamRecord {
                    name: name.clone(),
                    shape: s.value.shape().to_vec(),
                    data: s.value.data().to_vec(),
                })
                .collect(),
        }
    }

    fn from_file(file: ParamFile) -> Result<Self> {
        if file.format != PARAMS_FORMAT {
            return Err(Error::InvalidInput(format!(
                "not a parameter file (format `{}`)",
                file.format
            )));
        }
        if file.version != PARAMS_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: PARAMS_VERSION,
            });
        }
        let mut set = ParamSet::new();
        for rec in file.params {
            set.insert(rec.name, Tensor::new(rec.shape, rec.data)?)?;
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, s) in &self.slots {
            h.update(name.as_bytes());
            for d in s.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in s.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = ParamFile::deserialize(d)?;
        ParamSet::from_file(file).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format: String,
    version: u32,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut p = ParamSet::new();
        p.insert_uniform("w", &[16, 4], 16, &mut seeded(3)).unwrap();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = r#"{"format":"cfdialog-params","version":9,"params":[]}"#;
        assert!(matches!(
            ParamSet::from_json(text),
            Err(Error::Version { found: 9, .. })
        ));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut p = ParamSet::new();
            let n = values.len();
            p.insert("a.w", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            p.insert("a.b", Tensor::scalar(values[0] / 3.0)).unwrap();
            let back = ParamSet::from_json(&p.to_json().unwrap()).unwrap();
            for (name, t) in p.iter() {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                for (x, y) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(p.checksum(), back.checksum());
        }
    }
}

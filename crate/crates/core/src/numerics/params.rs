use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A named parameter tensor with its trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    /// Overwrites a parameter value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.value_mut(name)?;
        slot.check_same_shape(&value)?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.params[i].trainable = trainable;
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable().map(|p| p.value.len()).sum()
    }

    /// Concatenated little-endian `f64` bytes of every parameter in order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * 8);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    /// Adds `grad` into the entry for `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(g) => {
                g.check_same_shape(grad)?;
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    /// Element-wise sum of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.grads {
            self.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over the entries whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.norm_with_prefix("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::scalar(1.0), true).unwrap();
        assert!(ps.insert("a", Tensor::scalar(2.0), true).is_err());
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn blob_is_little_endian_concatenation() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::row(&[1.0, -2.0]), true).unwrap();
        ps.insert("b", Tensor::scalar(0.5), false).unwrap();
        let blob = ps.blob();
        assert_eq!(blob.len(), 24);
        assert_eq!(&blob[8..16], &(-2.0f64).to_le_bytes());
    }
}

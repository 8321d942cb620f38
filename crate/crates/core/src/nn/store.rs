use indexmap::IndexMap;
use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Named parameters with one gradient buffer each, in insertion order.
///
/// Order matters: optimizer state and checkpoints are laid out by entry
/// index, so two stores built by the same constructor line up exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Entry>,
}

/// Handle to a store entry, stable for the lifetime of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        value.ensure_finite(&name)?;
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape())?;
        let (idx, _) = self.entries.insert_full(name, Entry { value, grad });
        Ok(ParamId(idx))
    }

    /// Inserts a tensor drawn from U(-a, a) with `a = sqrt(3 / fan_in)`, i.e.
    /// unit-variance outputs for unit-variance inputs.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        self.insert_scaled_uniform(name, shape, a, rng)
    }

    pub fn insert_scaled_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        half_width: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| half_width * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Replaces every value with the matching entry of `other`; names and
    /// shapes must agree one-to-one.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Version(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Version(format!("unexpected parameter {name:?}")))?;
            if e.value.shape() != t.shape() {
                return Err(Error::Version(format!(
                    "parameter {name:?}: shape {:?} does not match {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            t.ensure_finite(name)?;
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Streams};

    #[test]
    fn insert_and_lookup() {
        let mut s = ParameterStore::new();
        let a = s.insert_zeros("a", &[2, 3]).unwrap();
        let mut rng = Streams::new(1).stream(Domain::Init, 0);
        let b = s.insert_uniform("b", &[3, 3], 3, &mut rng).unwrap();
        assert_eq!(s.id("a").unwrap(), a);
        assert_eq!(s.name(b), "b");
        assert!(s.value(b).data().iter().all(|v| v.abs() <= 1.0));
        assert!(s.insert_zeros("a", &[1, 1]).is_err());
        assert!(s.id("missing").is_err());
        assert_eq!(s.num_scalars(), 15);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut s = ParameterStore::new();
        s.insert_zeros("w", &[2, 2]).unwrap();
        let good = vec![("w".to_string(), Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())];
        s.load_values(&good).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0; 4]);
        let bad_shape = vec![("w".to_string(), Tensor::matrix(1, 4, vec![1.0; 4]).unwrap())];
        assert!(matches!(s.load_values(&bad_shape), Err(Error::Version(_))));
        let bad_name = vec![("v".to_string(), Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())];
        assert!(matches!(s.load_values(&bad_name), Err(Error::Version(_))));
    }
}

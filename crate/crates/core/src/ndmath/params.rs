use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable weights. Names are unique and shapes never change after insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Glorot-style uniform initialization `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-a..a));
        self.insert(name, t)
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not found")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Merges another set, failing on any name collision.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::new();
        p.init_const("w", &[2], 0.0).unwrap();
        assert!(matches!(p.init_const("w", &[2], 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_are_fixed() {
        let mut p = ParamSet::new();
        p.init_const("w", &[2, 2], 0.0).unwrap();
        assert!(p.set("w", Tensor::zeros(&[4])).is_err());
        assert!(p.set("w", Tensor::full(&[2, 2], 1.0)).is_ok());
    }

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.init_uniform("w", &[30, 20], 30, 20, &mut rng).unwrap();
        let a = (6.0f64 / 50.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() < a));

        let mut q = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        q.init_uniform("w", &[30, 20], 30, 20, &mut rng).unwrap();
        assert_eq!(p, q);
    }
}

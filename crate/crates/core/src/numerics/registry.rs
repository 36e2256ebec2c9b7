use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameters with a trainable/frozen partition.
///
/// A frozen parameter has `requires_grad` cleared, so no backward sweep ever
/// writes into it and [`ParamRegistry::grad`] reports exact zeros for it.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<Tensor> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        tensor.set_requires_grad(trainable);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor: tensor.clone(),
            trainable,
        });
        Ok(tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.entries[i].trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let e = &mut self.entries[i];
        e.trainable = trainable;
        e.tensor.set_requires_grad(trainable);
        if !trainable {
            e.tensor.zero_grad();
        }
        Ok(())
    }

    /// Applies `trainable` to every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let names: Vec<String> = self
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(String::from)
            .collect();
        for n in &names {
            self.set_trainable(n, trainable)
                .expect("name taken from registry");
        }
        names.len()
    }

    /// Names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// `(name, tensor, trainable)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of trainable scalars among names starting with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn grad(&self, name: &str) -> Option<Vec<f64>> {
        self.get(name).map(Tensor::grad_or_zeros)
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|e| e.tensor.zero_grad());
    }

    /// Copies of every parameter value, for later bitwise comparison.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.to_vec()))
            .collect()
    }

    /// Absorbs every entry of `other`, keeping its trainable flags.
    pub fn merge(&mut self, other: ParamRegistry) -> Result<()> {
        for e in other.entries {
            self.register(e.name, e.tensor, e.trainable)?;
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub registry: &'a mut ParamRegistry,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(registry: &'a mut ParamRegistry, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            registry,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Builder for a nested scope; parameters land under `prefix.scope.*`.
    pub fn scope(&mut self, scope: &str) -> ParamBuilder<'_, R> {
        let prefix = self.full_name(scope);
        ParamBuilder {
            registry: self.registry,
            rng: self.rng,
            prefix,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0, std)
            .map_err(|e| Error::Contract(format!("bad init std {std}: {e}")))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.add(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }

    fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::param(data, shape)?;
        let full = self.full_name(name);
        self.registry.register(full, t, true)
    }
}

use std::collections::HashMap;
use std::sync::Arc;

use crate::array::{Array, Scalar};
use crate::backend::Backend;
use crate::error::{invalid, Result};

/// Ordered collection of named learnable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Arc<Array<T>>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, a: Array<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid("ParamSet::insert", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), Arc::new(a)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array<T>>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Mutable access; copies the array first if a tape or eager pass still
    /// holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Array<T>>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), Arc::make_mut(a)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every parameter on a backend, in insertion order.
    pub fn bind<B: Backend<Elem = T>>(&self, backend: &B) -> BoundParams<B> {
        let tensors = self
            .entries
            .iter()
            .map(|(name, a)| backend.param(name, a))
            .collect();
        BoundParams {
            tensors,
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), Arc::new(a.cast())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters registered on a particular backend.
pub struct BoundParams<B: Backend> {
    tensors: Vec<B::Tensor>,
    index: HashMap<String, usize>,
}

impl<B: Backend> BoundParams<B> {
    pub fn get(&self, name: &str) -> Result<&B::Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| invalid("BoundParams::get", format!("unknown parameter {name}")))
    }
}

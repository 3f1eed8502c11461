use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named, insertion-ordered collection of model parameters and buffers.
///
/// Non-trainable entries (batch-norm running statistics) are carried along so
/// that checkpoints capture everything needed for evaluation.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter `{}` has shape {:?}, refusing {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values by name; every stored entry must be provided.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint has unknown parameter `{name}`")))?;
            self.set(id, value)?;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!(
                "checkpoint lacks parameter `{}`",
                self.entries[missing].name
            )));
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits_eq(*y))
            })
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}

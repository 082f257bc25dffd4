//! Named parameter registry with per-parameter freeze flags.
//!
//! Iteration order is lexicographic by name (BTreeMap), which pins the
//! optimizer update order, checkpoint record order, and therefore bit-level
//! reproducibility.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub tensor: Tensor<E>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, ParamEntry<E>>,
    pub rng_seed: u64,
}

impl<E: Element> ParamStore<E> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>, frozen: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam { name: name.into() });
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.frozen = frozen)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    /// Freeze every entry whose name starts with `prefix`. Returns how many
    /// entries were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Lexicographic iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn learnable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Bit-identical comparison of the entries selected by `prefix` against
    /// another store, for freeze-contract tests.
    pub fn prefix_bit_eq(&self, other: &ParamStore<E>, prefix: &str) -> bool {
        let mine: Vec<_> = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        let theirs: Vec<_> = other
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(theirs.iter())
                .all(|((ka, ea), (kb, eb))| {
                    ka == kb && ea.frozen == eb.frozen && ea.tensor.bit_eq(&eb.tensor)
                })
    }
}

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors with a per-entry frozen flag.
///
/// Entries are kept in name order so every traversal (gradient maps,
/// optimizer updates, serialization) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, ParamEntry { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Mutable access to a trainable entry. Frozen entries are never handed out.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.entries.get_mut(name) {
            Some(e) if !e.frozen => Ok(&mut e.tensor),
            Some(_) => Err(Error::Config(format!("parameter `{name}` is frozen"))),
            None => Err(Error::UnknownParam(name.to_owned())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|e| e.frozen)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, e)| !e.frozen).map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Copy with every entry's frozen flag set to `frozen`.
    pub fn with_frozen(&self, frozen: bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.clone(),
                            frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Union of two disjoint sets.
    pub fn merged(&self, other: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for (k, e) in &other.entries {
            out.insert(k.clone(), e.tensor.clone(), e.frozen)?;
        }
        Ok(out)
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, e)| k.strip_prefix(prefix).map(|s| (s.to_owned(), e.clone())))
                .collect(),
        }
    }

    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (format!("{prefix}{k}"), e.clone()))
                .collect(),
        }
    }

    /// Bitwise equality of names, flags and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.frozen == b.frozen && a.tensor.bit_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_frozen_access() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0), false).unwrap();
        p.insert("b", Tensor::scalar(2.0), true).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::scalar(0.0), false),
            Err(Error::DuplicateParam(_))
        ));
        assert!(p.trainable_mut("a").is_ok());
        assert!(p.trainable_mut("b").is_err());
        assert!(matches!(p.get("c"), Err(Error::UnknownParam(_))));
        assert_eq!(p.trainable_names().collect::<Vec<_>>(), vec!["a"]);
    }

    #[test]
    fn merged_rejects_overlap() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0), false).unwrap();
        assert!(p.merged(&p).is_err());
        let q = p.prefixed("m.");
        let both = p.merged(&q).unwrap();
        assert_eq!(both.len(), 2);
        assert!(both.with_prefix_stripped("m.").bit_eq(&p));
    }
}

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Role of a client-side parameter, derived from the first name segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// `shared.*`: the communicated adapter A_s.
    Shared,
    /// `frozen.*`: the per-round frozen copy of A_s inside the teacher.
    Frozen,
    /// `local.*`: the private adapter A_c.
    Local,
    Lora,
    Prompt,
    /// `backbone.*`: trainable copies of backbone tensors (bias and full modes).
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::Frozen => "frozen",
            ParamGroup::Local => "local",
            ParamGroup::Lora => "lora",
            ParamGroup::Prompt => "prompt",
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let first = name.split('.').next()?;
        [
            ParamGroup::Shared,
            ParamGroup::Frozen,
            ParamGroup::Local,
            ParamGroup::Lora,
            ParamGroup::Prompt,
            ParamGroup::Backbone,
            ParamGroup::Head,
        ]
        .into_iter()
        .find(|g| g.prefix() == first)
    }
}

/// Name-ordered tensor collection; the unit of storage, messaging and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors(BTreeMap<String, Tensor>);

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.0.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Entries whose group is `group`, names kept as-is.
    pub fn group(&self, group: ParamGroup) -> NamedTensors {
        self.filter(|n| ParamGroup::of(n) == Some(group))
    }

    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> NamedTensors {
        NamedTensors(
            self.0
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        )
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.0.retain(|n, _| ParamGroup::of(n) != Some(group));
    }

    /// Copies every entry of `other` in, replacing existing names.
    pub fn extend_from(&mut self, other: &NamedTensors) {
        for (n, t) in other.iter() {
            self.0.insert(n.clone(), t.clone());
        }
    }

    /// Renames `from.*` to `to.*` (used to copy A_s into the frozen slot).
    pub fn renamed_prefix(&self, from: &str, to: &str) -> NamedTensors {
        let lead = format!("{from}.");
        NamedTensors(
            self.0
                .iter()
                .filter_map(|(n, t)| {
                    n.strip_prefix(&lead)
                        .map(|rest| (format!("{to}.{rest}"), t.clone()))
                })
                .collect(),
        )
    }

    /// Same names in the same order with the same shapes.
    pub fn same_geometry(&self, other: &NamedTensors) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Bit-level equality of names, shapes and payloads.
    pub fn bit_eq(&self, other: &NamedTensors) -> bool {
        self.same_geometry(other)
            && self
                .0
                .values()
                .zip(other.0.values())
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn max_abs_diff(&self, other: &NamedTensors) -> f64 {
        assert!(self.same_geometry(other), "max_abs_diff geometry");
        self.0
            .values()
            .zip(other.0.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// SHA-256 over names, shapes and little-endian payloads, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.0 {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

impl FromIterator<(String, Tensor)> for NamedTensors {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        NamedTensors(iter.into_iter().collect())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

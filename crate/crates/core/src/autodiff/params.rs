use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors: trainable parameters plus non-trainable buffers such as
/// batch-norm running statistics. Names are stable and hierarchical
/// (`backbone.conv1.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.entries[i] = Entry {
                name: name.to_string(),
                value,
                trainable,
            };
            return ParamId(i);
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor '{name}'")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Entries sorted by name.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.index.iter().map(|(name, &i)| {
            let e = &self.entries[i];
            (name.as_str(), &e.value, e.trainable)
        })
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Copies every tensor from `other` whose name starts with `prefix`,
    /// checking shapes against the tensors already present.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value, _) in other.named() {
            if !name.starts_with(prefix) {
                continue;
            }
            let id = self.require(name)?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor '{name}': shape {:?} in source, {:?} in target",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Equal when the same names hold equal tensors, regardless of insertion order.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.named().eq(other.named())
    }
}

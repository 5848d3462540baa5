//! Layer primitives, the named parameter store, and the forward context
//! that binds stored tensors onto a tape.

mod layers;

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, NodeId, Tape, Tensor};

pub use layers::{
    pool_desc, BatchNorm2d, Conv2d, Dense, DepthwiseSeparableBlock, LayerDesc, LayerKind,
    ResidualBlock,
};

/// Trainable parameter, non-trainable buffer (batch-norm running stats),
/// or a dataset tensor stored in the same container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    Data,
}

impl EntryKind {
    /// Buffers and data are recognised by name; everything else is a parameter.
    pub fn from_name(name: &str) -> Self {
        if name.starts_with("data.") {
            Self::Data
        } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            Self::Buffer
        } else {
            Self::Param
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub tensor: Tensor,
    pub kind: EntryKind,
    pub frozen: bool,
}

/// Ordered map from hierarchical name (`pre_fe.conv1.weight`) to tensor.
///
/// Iteration follows insertion order. Frozen entries are never touched by
/// the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, kind: EntryKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::ParamMismatch(format!("duplicate entry `{name}`")));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor: tensor.detach(),
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    /// Inserts with the kind inferred from the name.
    pub fn insert_named(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, EntryKind::from_name(name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::ParamMismatch(format!("no entry `{name}`")))
    }

    /// Replaces the value of an existing entry; shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::ParamMismatch(format!("no entry `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::ParamMismatch(format!(
                "`{name}`: shape {:?} cannot take {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.frozen)
    }

    /// Marks every entry whose name starts with `prefix` as frozen; returns
    /// how many entries matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, e) in &mut self.entries {
            if name.starts_with(prefix) {
                e.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Independent copy of the entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, e)| {
                let copy = Tensor::new(e.tensor.shape(), e.tensor.to_vec()).expect("same shape");
                (
                    k.clone(),
                    Entry {
                        tensor: copy,
                        kind: e.kind,
                        frozen: e.frozen,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }

    /// Same names in the same order with bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.tensor.bit_eq(&b.tensor))
    }

    /// Copies every entry of `src` into `self` by name. Entries must exist
    /// with equal shapes; frozen flags of `self` are kept.
    pub fn copy_from(&mut self, src: &ParamStore) -> Result<()> {
        for (name, e) in src.iter() {
            let copy = Tensor::new(e.tensor.shape(), e.tensor.to_vec())?;
            self.set(name, copy)?;
        }
        Ok(())
    }
}

/// Which stored tensors get a gradient node when bound onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    /// Every parameter, frozen or not.
    All,
    /// Only parameters that are not frozen.
    Trainable,
    /// Nothing; pure evaluation.
    None,
}

struct Bound {
    tensor: Tensor,
    frozen: bool,
}

/// Forward-pass context: tape, bound parameters, and train/eval mode.
///
/// Batch-norm layers in training mode record their batch statistics here;
/// apply them afterwards with [`ParamStore`]-owning code (see
/// `Model::apply_batch_stats`). Batch-norm layers whose scale parameter is
/// frozen always run in eval mode.
pub struct Forward<'t> {
    pub tape: &'t Tape,
    train: bool,
    bound: HashMap<String, Bound>,
    tracked: Vec<(String, NodeId)>,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, track: Track, train: bool) -> Self {
        let mut bound = HashMap::with_capacity(store.len());
        let mut tracked = Vec::new();
        for (name, e) in store.iter() {
            let wants = match track {
                Track::All => e.kind == EntryKind::Param,
                Track::Trainable => e.kind == EntryKind::Param && !e.frozen,
                Track::None => false,
            };
            let tensor = if wants && tape.is_recording() {
                let t = tape.leaf(&e.tensor);
                tracked.push((name.to_string(), t.node().expect("recording tape")));
                t
            } else {
                e.tensor.detach()
            };
            bound.insert(
                name.to_string(),
                Bound {
                    tensor,
                    frozen: e.frozen,
                },
            );
        }
        Self {
            tape,
            train,
            bound,
            tracked,
            batch_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.bound
            .get(name)
            .map(|b| &b.tensor)
            .ok_or_else(|| Error::ParamMismatch(format!("forward needs `{name}`, not in store")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.bound.get(name).is_some_and(|b| b.frozen)
    }

    /// Parameters that received a tape node, in store order.
    pub fn tracked(&self) -> &[(String, NodeId)] {
        &self.tracked
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.tracked
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub(crate) fn push_batch_stats(&mut self, layer: &str, stats: BatchStats) {
        self.batch_stats.push((layer.to_string(), stats));
    }

    /// Batch statistics recorded by training-mode batch-norm layers.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.batch_stats)
    }
}

//! Named parameter storage with freeze flags.
//!
//! Parameters are registered once, in a fixed order, under hierarchical
//! names ("block0.attn.wq", "block1.moe.router", "lora.vis.proj.fc1.a").
//! The freeze flag decides whether the tape reports a gradient for a
//! parameter and whether the optimizer may touch it; serialization follows
//! registration order so checkpoints are byte-stable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total element count over parameters selected by `pred`.
    pub fn count_elements(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over name, shape, and little-endian bytes of every parameter
    /// selected by `pred`, in registration order.
    pub fn hash_subset(&self, pred: impl Fn(&ParamEntry) -> bool) -> String {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(e)) {
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_frozen(&self) -> String {
        self.hash_subset(|e| e.frozen)
    }
}

/// Accumulated gradients keyed by parameter identity. Frozen parameters
/// never receive an entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(existing) => {
                if existing.shape() != grad.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shapes {:?} and {:?} differ for one parameter",
                        existing.shape(),
                        grad.shape()
                    )));
                }
                *existing = existing.add(grad)?;
            }
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::TensorRecord;
use crate::error::{Error, Result};

/// Which part a checkpoint plays in a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Multilingual,
    Anchor,
    Merged,
}

/// An ordered collection of named tensors.
///
/// Iteration is always lexicographic by tensor name, independent of how the
/// tensors were laid out on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorRecord>,
    role: Role,
    source_path: PathBuf,
    /// Current name -> name on disk, for keys rewritten by a remap.
    original_names: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(role: Role) -> Self {
        Self {
            tensors: BTreeMap::new(),
            role,
            source_path: PathBuf::new(),
            original_names: BTreeMap::new(),
        }
    }

    pub fn from_records(role: Role, records: impl IntoIterator<Item = TensorRecord>) -> Result<Self> {
        let mut ckpt = Self::new(role);
        for r in records {
            ckpt.insert(r)?;
        }
        Ok(ckpt)
    }

    pub fn with_source_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = path.into();
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    /// Inserts a tensor; a name that is already present is an error.
    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        let name = record.name().to_string();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.insert(name, record);
        Ok(())
    }

    /// Inserts or replaces a tensor.
    pub fn put(&mut self, record: TensorRecord) {
        self.tensors.insert(record.name().to_string(), record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(TensorRecord::numel).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.tensors.values().map(TensorRecord::byte_len).sum()
    }

    pub(crate) fn into_parts(self) -> (BTreeMap<String, TensorRecord>, BTreeMap<String, String>) {
        (self.tensors, self.original_names)
    }

    pub(crate) fn from_parts(
        role: Role,
        source_path: PathBuf,
        tensors: BTreeMap<String, TensorRecord>,
        original_names: BTreeMap<String, String>,
    ) -> Self {
        Self {
            tensors,
            role,
            source_path,
            original_names,
        }
    }

    pub fn original_names(&self) -> &BTreeMap<String, String> {
        &self.original_names
    }

    pub(crate) fn set_original_names(&mut self, names: BTreeMap<String, String>) {
        self.original_names = names;
    }

    /// Undoes every key remap applied since load, restoring on-disk names.
    pub fn restore_original_names(self) -> Result<Checkpoint> {
        let Checkpoint {
            tensors,
            role,
            source_path,
            original_names,
        } = self;
        let mut out = BTreeMap::new();
        for (name, mut record) in tensors {
            let target = original_names.get(&name).cloned().unwrap_or(name);
            if let Some(prev) = out.get(&target) {
                let prev: &TensorRecord = prev;
                return Err(Error::RemapCollision {
                    first: prev.name().to_string(),
                    second: record.name().to_string(),
                    target,
                });
            }
            record.set_name(target.clone());
            out.insert(target, record);
        }
        Ok(Checkpoint::from_parts(role, source_path, out, BTreeMap::new()))
    }

    /// SHA-256 over every tensor's name, dtype, shape and payload, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in self.tensors.values() {
            h.update((r.name().len() as u64).to_le_bytes());
            h.update(r.name().as_bytes());
            h.update(r.dtype().to_string().as_bytes());
            h.update((r.rank() as u64).to_le_bytes());
            for &d in r.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(r.bytes());
        }
        hex::encode(h.finalize())
    }
}

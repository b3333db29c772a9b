use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Rewrites keys starting with `from` so they start with `to` instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapRule {
    pub from: String,
    pub to: String,
}

impl RemapRule {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }

    fn apply(&self, key: &str) -> Option<String> {
        key.strip_prefix(&self.from).map(|rest| format!("{}{}", self.to, rest))
    }
}

/// Built-in rule sets for multimodal checkpoints whose language backbone sits
/// under a different prefix than the text-only base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapPreset {
    Identity,
    /// LLaVA-1.5 style: `language_model.model.*`, `language_model.lm_head.*`.
    Llava,
    /// LLaVA-NeXT layout used by Pangea (Qwen2 backbone); same prefixes as LLaVA.
    Pangea,
    /// Qwen3-VL and newer transformers layouts: `model.language_model.*`.
    Qwen3Vl,
}

impl RemapPreset {
    pub fn rules(self) -> Vec<RemapRule> {
        match self {
            RemapPreset::Identity => Vec::new(),
            RemapPreset::Llava | RemapPreset::Pangea => vec![
                RemapRule::new("language_model.model.", "model."),
                RemapRule::new("language_model.lm_head.", "lm_head."),
            ],
            RemapPreset::Qwen3Vl => vec![RemapRule::new("model.language_model.", "model.")],
        }
    }
}

impl fmt::Display for RemapPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemapPreset::Identity => "identity",
            RemapPreset::Llava => "llava",
            RemapPreset::Pangea => "pangea",
            RemapPreset::Qwen3Vl => "qwen3_vl",
        })
    }
}

impl FromStr for RemapPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(RemapPreset::Identity),
            "llava" => Ok(RemapPreset::Llava),
            "pangea" => Ok(RemapPreset::Pangea),
            "qwen3_vl" | "qwen3-vl" => Ok(RemapPreset::Qwen3Vl),
            other => Err(Error::Config(format!("unknown remap preset `{other}`"))),
        }
    }
}

/// Applies the first matching prefix rule to every key.
///
/// The mapping must be injective over the checkpoint's keys; two keys landing
/// on the same name is an error. The original on-disk names are remembered
/// so [`Checkpoint::restore_original_names`] can undo the rewrite.
pub fn remap_keys(ckpt: Checkpoint, rules: &[RemapRule]) -> Result<Checkpoint> {
    if rules.is_empty() {
        return Ok(ckpt);
    }
    let role = ckpt.role();
    let source = ckpt.source_path().to_path_buf();
    let (tensors, old_originals) = ckpt.into_parts();

    let mut out = BTreeMap::new();
    let mut origin_of: BTreeMap<String, String> = BTreeMap::new();
    let mut originals = BTreeMap::new();
    for (key, mut record) in tensors {
        let target = rules
            .iter()
            .find_map(|r| r.apply(&key))
            .unwrap_or_else(|| key.clone());
        if let Some(first) = origin_of.get(&target) {
            return Err(Error::RemapCollision {
                first: first.clone(),
                second: key,
                target,
            });
        }
        let on_disk = old_originals.get(&key).cloned().unwrap_or_else(|| key.clone());
        if on_disk != target {
            originals.insert(target.clone(), on_disk);
        }
        origin_of.insert(target.clone(), key);
        record.set_name(target.clone());
        out.insert(target, record);
    }
    let mut remapped = Checkpoint::from_parts(role, source, out, BTreeMap::new());
    remapped.set_original_names(originals);
    Ok(remapped)
}

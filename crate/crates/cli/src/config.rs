//! Run configuration: defaults, then the JSON file, then `--set` overrides.

use std::path::{Path, PathBuf};

use dimerge_core::diagnostics::{ModuleKeySchema, SchemaPreset};
use dimerge_core::merge::MergeConfig;
use dimerge_core::store::{RemapPreset, RemapRule};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// 5 GB, the usual hub shard size.
pub const DEFAULT_SHARD_LIMIT: u64 = 5_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RemapSpec {
    Preset(RemapPreset),
    Rules(Vec<RemapRule>),
}

impl Default for RemapSpec {
    fn default() -> Self {
        RemapSpec::Preset(RemapPreset::Identity)
    }
}

impl RemapSpec {
    pub fn rules(&self) -> Vec<RemapRule> {
        match self {
            RemapSpec::Preset(p) => p.rules(),
            RemapSpec::Rules(r) => r.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemapConfig {
    pub base: RemapSpec,
    pub multilingual: RemapSpec,
    pub anchor: RemapSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSpec {
    Preset(SchemaPreset),
    Custom(ModuleKeySchema),
}

impl SchemaSpec {
    pub fn schema(&self) -> ModuleKeySchema {
        match self {
            SchemaSpec::Preset(p) => ModuleKeySchema::preset(*p),
            SchemaSpec::Custom(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub schema: SchemaSpec,
    pub csv_path: Option<PathBuf>,
    pub json_path: Option<PathBuf>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            schema: SchemaSpec::Preset(SchemaPreset::Llama),
            csv_path: None,
            json_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub base_path: Option<PathBuf>,
    pub multilingual_path: Option<PathBuf>,
    pub anchor_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub overwrite: bool,
    pub threads: Option<usize>,
    pub shard_limit_bytes: u64,
    pub remap: RemapConfig,
    pub merge: MergeConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            base_path: None,
            multilingual_path: None,
            anchor_path: None,
            output_path: None,
            report_path: None,
            overwrite: false,
            threads: None,
            shard_limit_bytes: DEFAULT_SHARD_LIMIT,
            remap: RemapConfig::default(),
            merge: MergeConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `dotted.key=value`. The value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .filter(|(k, _)| !k.is_empty() && k.split('.').all(|s| !s.is_empty()))
        .ok_or_else(|| CliError::SetSyntax(assignment.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .unwrap()
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Defaults, overlaid with the file (if any), then the overrides.
pub fn load_run_config(path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::ConfigParse(e.to_string()))?;
        if !file.is_object() {
            return Err(CliError::ConfigParse("top level must be an object".into()));
        }
        deep_merge(&mut root, file);
    }
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::ConfigParse(e.to_string()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::SchemaVersion {
            found: cfg.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if cfg.threads == Some(0) {
        return Err(CliError::Invalid("threads must be positive".into()));
    }
    if cfg.shard_limit_bytes == 0 {
        return Err(CliError::Invalid("shard_limit_bytes must be positive".into()));
    }
    cfg.merge = cfg.merge.resolved()?;
    Ok(cfg)
}

/// Input checkpoint path that must be set and exist.
pub fn existing_input(field: &'static str, value: &Option<PathBuf>) -> CliResult<PathBuf> {
    match value {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(CliError::MissingPath {
            field,
            path: p.display().to_string(),
        }),
        None => Err(CliError::MissingPath {
            field,
            path: "<unset>".into(),
        }),
    }
}

//! Reading and writing checkpoints in the safetensors layout.
//!
//! A checkpoint on disk is either a single `.safetensors` file or a directory.
//! Directories hold either one `model.safetensors` or several shards plus a
//! `*.safetensors.index.json` manifest mapping tensor names to shard files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Role};
use super::record::{DType, TensorRecord};
use crate::error::{Error, Result};

pub const SINGLE_FILE_NAME: &str = "model.safetensors";
pub const INDEX_FILE_NAME: &str = "model.safetensors.index.json";

#[derive(Debug, Serialize, Deserialize)]
struct ShardIndex {
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
    weight_map: BTreeMap<String, String>,
}

/// Loads a checkpoint from a tensor file or a sharded directory.
pub fn load_checkpoint(path: impl AsRef<Path>, role: Role) -> Result<Checkpoint> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut ckpt = Checkpoint::new(role).with_source_path(path);
    if meta.is_file() {
        for record in read_tensor_file(path)? {
            ckpt.insert(record)?;
        }
        return Ok(ckpt);
    }

    match find_index(path)? {
        Some(index_path) => load_sharded(&index_path, ckpt),
        None => {
            let single = path.join(SINGLE_FILE_NAME);
            let candidate = if single.is_file() {
                single
            } else {
                let mut files = safetensors_files(path)?;
                if files.len() != 1 {
                    return Err(Error::MalformedIndex {
                        path: path.to_path_buf(),
                        reason: format!(
                            "no shard index manifest and {} tensor files in directory",
                            files.len()
                        ),
                    });
                }
                files.remove(0)
            };
            for record in read_tensor_file(&candidate)? {
                ckpt.insert(record)?;
            }
            Ok(ckpt)
        }
    }
}

fn load_sharded(index_path: &Path, mut ckpt: Checkpoint) -> Result<Checkpoint> {
    let raw = fs::read(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: ShardIndex = serde_json::from_slice(&raw).map_err(|e| Error::MalformedIndex {
        path: index_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = index_path.parent().unwrap_or(Path::new("."));

    let mut by_shard: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (tensor, shard) in &index.weight_map {
        by_shard.entry(shard.as_str()).or_default().insert(tensor.as_str());
    }

    for (shard, expected) in by_shard {
        let shard_path = dir.join(shard);
        if !shard_path.is_file() {
            return Err(Error::MalformedIndex {
                path: index_path.to_path_buf(),
                reason: format!("index references absent shard {shard}"),
            });
        }
        let records = read_tensor_file(&shard_path)?;
        let present: BTreeSet<&str> = records.iter().map(TensorRecord::name).collect();
        if let Some(missing) = expected.iter().find(|t| !present.contains(*t)) {
            return Err(Error::ShardMissingTensor {
                tensor: missing.to_string(),
                shard: shard_path,
            });
        }
        for record in records {
            if !expected.contains(record.name()) {
                log::warn!(
                    "{}: tensor `{}` is not listed in the index",
                    shard_path.display(),
                    record.name()
                );
            }
            ckpt.insert(record)?;
        }
    }
    Ok(ckpt)
}

fn find_index(dir: &Path) -> Result<Option<PathBuf>> {
    let preferred = dir.join(INDEX_FILE_NAME);
    if preferred.is_file() {
        return Ok(Some(preferred));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().ends_with(".safetensors.index.json") {
            found.push(entry.path());
        }
    }
    found.sort();
    match found.len() {
        0 => Ok(None),
        1 => Ok(found.pop()),
        _ => Err(Error::MalformedIndex {
            path: dir.to_path_buf(),
            reason: "multiple shard index manifests".into(),
        }),
    }
}

fn safetensors_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "safetensors") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Parses every tensor in one safetensors file.
pub fn read_tensor_file(path: &Path) -> Result<Vec<TensorRecord>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(st.len());
    for (name, view) in st.tensors() {
        let dtype = DType::from_safetensors(view.dtype()).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: format!("{:?}", view.dtype()),
        })?;
        out.push(TensorRecord::from_bytes(
            name,
            dtype,
            view.shape().to_vec(),
            view.data().to_vec(),
        )?);
    }
    out.sort_by(|a, b| a.name().cmp(b.name()));
    Ok(out)
}

/// Files produced by [`save_checkpoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedLayout {
    pub shards: Vec<PathBuf>,
    pub index: Option<PathBuf>,
}

/// Groups tensors (in name order) into shards whose payload stays within
/// `shard_limit` bytes. A tensor larger than the limit gets a shard of its own.
pub fn plan_shards(ckpt: &Checkpoint, shard_limit: u64) -> Vec<Vec<&TensorRecord>> {
    let mut shards: Vec<Vec<&TensorRecord>> = Vec::new();
    let mut current: Vec<&TensorRecord> = Vec::new();
    let mut used: u64 = 0;
    for r in ckpt.iter() {
        let size = r.byte_len() as u64;
        if !current.is_empty() && used + size > shard_limit {
            shards.push(std::mem::take(&mut current));
            used = 0;
        }
        used += size;
        current.push(r);
    }
    if !current.is_empty() {
        shards.push(current);
    }
    shards
}

/// Writes a checkpoint.
///
/// A `path` ending in `.safetensors` is written as a single file and must fit
/// in one shard. Any other path is treated as a directory: one shard becomes
/// `model.safetensors`, several become numbered shard files plus an index.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, shard_limit: u64) -> Result<SavedLayout> {
    let path = path.as_ref();
    if ckpt.is_empty() {
        return Err(Error::EmptyCheckpoint);
    }
    if shard_limit == 0 {
        return Err(Error::InvalidArgument("shard limit must be positive".into()));
    }
    let shards = plan_shards(ckpt, shard_limit);
    let file_mode = path.extension().is_some_and(|x| x == "safetensors");

    if file_mode {
        if shards.len() > 1 {
            return Err(Error::InvalidArgument(format!(
                "{} needs {} shards; give a directory path for sharded output",
                path.display(),
                shards.len()
            )));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_shard(&shards[0], path)?;
        return Ok(SavedLayout {
            shards: vec![path.to_path_buf()],
            index: None,
        });
    }

    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    if shards.len() == 1 {
        let file = path.join(SINGLE_FILE_NAME);
        write_shard(&shards[0], &file)?;
        return Ok(SavedLayout {
            shards: vec![file],
            index: None,
        });
    }

    let n = shards.len();
    let mut weight_map = BTreeMap::new();
    let mut files = Vec::with_capacity(n);
    for (i, shard) in shards.iter().enumerate() {
        let fname = format!("model-{:05}-of-{:05}.safetensors", i + 1, n);
        let file = path.join(&fname);
        write_shard(shard, &file)?;
        for r in shard {
            weight_map.insert(r.name().to_string(), fname.clone());
        }
        files.push(file);
    }
    let mut metadata = serde_json::Map::new();
    metadata.insert("total_size".into(), (ckpt.total_bytes() as u64).into());
    let index = ShardIndex {
        metadata,
        weight_map,
    };
    let index_path = path.join(INDEX_FILE_NAME);
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    Ok(SavedLayout {
        shards: files,
        index: Some(index_path),
    })
}

fn write_shard(records: &[&TensorRecord], file: &Path) -> Result<()> {
    let metadata: HashMap<String, String> = [("format".to_string(), "pt".to_string())].into();
    let items = records.iter().map(|r| (r.name().to_string(), *r));
    safetensors::serialize_to_file(items, &Some(metadata), file).map_err(|e| match e {
        safetensors::SafeTensorError::IoError(io) => Error::io(file, io),
        other => Error::MalformedFile {
            path: file.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

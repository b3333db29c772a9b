//! Per-layer, per-module heterogeneity tables for the two residuals.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tensor_stats, HeterogeneityStats};
use crate::scope::{LayerPattern, ScopeFilter, DEFAULT_LAYER_PATTERN};
use crate::store::{align_triple, AlignPolicy, Checkpoint, HighRankPolicy, ShapePolicy};

/// Label for keys no rule matches.
pub const OTHER_LABEL: &str = "other";

/// Layer assigned to keys without a parsed layer index.
pub const NO_LAYER: i64 = -1;

/// How backbone keys map to (layer, module) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleKeySchema {
    pub layer_index_pattern: LayerPattern,
    /// `(substring, label)` pairs; the first match wins.
    pub module_labels: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaPreset {
    Llama,
    Qwen2,
    Qwen3,
}

impl FromStr for SchemaPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llama" => Ok(Self::Llama),
            "qwen2" => Ok(Self::Qwen2),
            "qwen3" => Ok(Self::Qwen3),
            _ => Err(Error::Config(format!("unknown schema preset `{s}`"))),
        }
    }
}

impl fmt::Display for SchemaPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Llama => "llama",
            Self::Qwen2 => "qwen2",
            Self::Qwen3 => "qwen3",
        })
    }
}

const DECODER_LABELS: &[(&str, &str)] = &[
    ("q_proj", "attn.q"),
    ("k_proj", "attn.k"),
    ("v_proj", "attn.v"),
    ("o_proj", "attn.o"),
    ("gate_proj", "mlp.gate"),
    ("up_proj", "mlp.up"),
    ("down_proj", "mlp.down"),
    ("input_layernorm", "norm.input"),
    ("post_attention_layernorm", "norm.post_attn"),
    ("embed_tokens", "embed"),
    ("lm_head", "lm_head"),
    ("model.norm.", "norm.final"),
];

const QWEN3_EXTRA: &[(&str, &str)] = &[("q_norm", "attn.q_norm"), ("k_norm", "attn.k_norm")];

impl ModuleKeySchema {
    pub fn new(layer_index_pattern: &str, module_labels: &[(&str, &str)]) -> Result<Self> {
        Ok(Self {
            layer_index_pattern: LayerPattern::new(layer_index_pattern)?,
            module_labels: module_labels
                .iter()
                .map(|(s, l)| (s.to_string(), l.to_string()))
                .collect(),
        })
    }

    pub fn preset(preset: SchemaPreset) -> Self {
        let mut labels = DECODER_LABELS.to_vec();
        if preset == SchemaPreset::Qwen3 {
            labels.splice(4..4, QWEN3_EXTRA.iter().copied());
        }
        Self::new(DEFAULT_LAYER_PATTERN, &labels).expect("preset schema is valid")
    }

    pub fn label_of(&self, key: &str) -> &str {
        self.module_labels
            .iter()
            .find(|(s, _)| key.contains(s.as_str()))
            .map_or(OTHER_LABEL, |(_, l)| l.as_str())
    }

    /// Sort position of a label: rule order, then "other".
    fn label_rank(&self, label: &str) -> usize {
        self.module_labels
            .iter()
            .position(|(_, l)| l == label)
            .unwrap_or(self.module_labels.len())
    }
}

/// One heatmap cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: i64,
    pub module: String,
    /// Frobenius norm of the residual over the whole group.
    #[serde(rename = "norm_ml")]
    pub residual_norm_ml: f64,
    #[serde(rename = "norm_mm")]
    pub residual_norm_mm: f64,
    /// Column-count-weighted means over the group's matrices; absent when
    /// the group holds only vectors.
    #[serde(rename = "dirdev_ml")]
    pub mean_dir_dev_ml: Option<f64>,
    #[serde(rename = "dirdev_mm")]
    pub mean_dir_dev_mm: Option<f64>,
    #[serde(rename = "cross_cos")]
    pub mean_cross_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub rows: Vec<HeatmapRow>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct Accumulator {
    sq_ml: f64,
    sq_mm: f64,
    columns: usize,
    dir_ml: f64,
    dir_mm: f64,
    cross: f64,
}

impl Accumulator {
    fn add(&mut self, s: &HeterogeneityStats) {
        self.sq_ml += s.residual_norm_ml * s.residual_norm_ml;
        self.sq_mm += s.residual_norm_mm * s.residual_norm_mm;
        if let (Some(a), Some(b), Some(c)) = (s.mean_dir_dev_ml, s.mean_dir_dev_mm, s.mean_cross_cosine) {
            let w = s.columns as f64;
            self.columns += s.columns;
            self.dir_ml += w * a;
            self.dir_mm += w * b;
            self.cross += w * c;
        }
    }

    fn row(&self, layer: i64, module: String) -> HeatmapRow {
        let mean = |x: f64| (self.columns > 0).then(|| x / self.columns as f64);
        HeatmapRow {
            layer,
            module,
            residual_norm_ml: self.sq_ml.sqrt(),
            residual_norm_mm: self.sq_mm.sqrt(),
            mean_dir_dev_ml: mean(self.dir_ml),
            mean_dir_dev_mm: mean(self.dir_mm),
            mean_cross_cosine: mean(self.cross),
        }
    }
}

/// Heterogeneity of the two residuals over the shared backbone.
///
/// Tensors outside the shared backbone and tensors of rank above 2 are
/// skipped. Inputs are only read.
pub fn diagnose(
    base: &Checkpoint,
    ml: &Checkpoint,
    anchor: &Checkpoint,
    schema: &ModuleKeySchema,
    epsilon: f64,
) -> Result<Diagnosis> {
    let policy = AlignPolicy {
        shape: ShapePolicy::Strict,
        high_rank: HighRankPolicy::PassThrough,
    };
    let (triples, _) = align_triple(base, ml, anchor, &ScopeFilter::full(), policy)?;
    let stats: Vec<HeterogeneityStats> = triples
        .par_iter()
        .map(|t| tensor_stats(t, epsilon))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut any_layer = false;
    let mut groups: BTreeMap<(i64, usize, String), Accumulator> = BTreeMap::new();
    for (t, s) in triples.iter().zip(&stats) {
        let layer = match schema.layer_index_pattern.layer_of(&t.name) {
            Some(l) => {
                any_layer = true;
                i64::from(l)
            }
            None => NO_LAYER,
        };
        let label = schema.label_of(&t.name).to_string();
        groups
            .entry((layer, schema.label_rank(&label), label))
            .or_default()
            .add(s);
    }
    if !triples.is_empty() && !any_layer {
        let msg = format!(
            "layer pattern `{}` matched no backbone key; all rows are under layer {NO_LAYER}",
            schema.layer_index_pattern.as_str()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let rows = groups
        .into_iter()
        .map(|((layer, _, label), acc)| acc.row(layer, label))
        .collect();
    Ok(Diagnosis { rows, warnings })
}

pub const CSV_HEADER: [&str; 7] = [
    "layer", "module", "norm_ml", "norm_mm", "dirdev_ml", "dirdev_mm", "cross_cos",
];

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn require_rows(rows: &[HeatmapRow]) -> Result<()> {
    if rows.is_empty() {
        Err(Error::InvalidArgument("no heatmap rows to export".into()))
    } else {
        Ok(())
    }
}

/// Writes rows as CSV with 9 significant digits; missing means are empty cells.
pub fn export_csv(rows: &[HeatmapRow], path: &Path) -> Result<()> {
    require_rows(rows)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    let opt = |x: Option<f64>| x.map(sig9).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.module.clone(),
            sig9(r.residual_norm_ml),
            sig9(r.residual_norm_mm),
            opt(r.mean_dir_dev_ml),
            opt(r.mean_dir_dev_mm),
            opt(r.mean_cross_cosine),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes rows as a JSON array of objects keyed like the CSV header.
pub fn export_json(rows: &[HeatmapRow], path: &Path) -> Result<()> {
    require_rows(rows)?;
    let text = serde_json::to_string_pretty(rows).expect("rows serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DType, Role, TensorRecord};

    fn ckpt(entries: &[(&str, &[usize], Vec<f32>)]) -> Checkpoint {
        let records = entries
            .iter()
            .map(|(n, s, v)| TensorRecord::from_f32(*n, s.to_vec(), v, DType::F32).unwrap());
        Checkpoint::from_records(Role::Base, records).unwrap()
    }

    #[test]
    fn labels_follow_rule_order() {
        let s = ModuleKeySchema::preset(SchemaPreset::Qwen3);
        assert_eq!(s.label_of("model.layers.3.self_attn.q_norm.weight"), "attn.q_norm");
        assert_eq!(s.label_of("model.layers.3.post_attention_layernorm.weight"), "norm.post_attn");
        assert_eq!(s.label_of("model.rotary.inv_freq"), OTHER_LABEL);
        assert_eq!(s.layer_index_pattern.layer_of("model.layers.12.mlp.up_proj.weight"), Some(12));
    }

    #[test]
    fn single_tensor_row_matches_stats() {
        let key = "model.layers.0.self_attn.q_proj.weight";
        let b = ckpt(&[(key, &[2, 2], vec![1.0, 0.0, 0.0, 1.0])]);
        let l = ckpt(&[(key, &[2, 2], vec![1.5, 0.0, 0.0, 1.0])]);
        let m = ckpt(&[(key, &[2, 2], vec![1.0, 0.2, 0.3, 1.0])]);
        let d = diagnose(&b, &l, &m, &ModuleKeySchema::preset(SchemaPreset::Llama), 1e-8).unwrap();
        assert_eq!(d.rows.len(), 1);
        assert!(d.warnings.is_empty());
        let (triples, _) = align_triple(&b, &l, &m, &ScopeFilter::full(), AlignPolicy::default()).unwrap();
        let s = tensor_stats(&triples[0], 1e-8).unwrap();
        let r = &d.rows[0];
        assert_eq!((r.layer, r.module.as_str()), (0, "attn.q"));
        assert!((r.residual_norm_ml - s.residual_norm_ml).abs() < 1e-15);
        assert!((r.residual_norm_mm - s.residual_norm_mm).abs() < 1e-15);
        assert_eq!(r.mean_dir_dev_ml, s.mean_dir_dev_ml);
        assert_eq!(r.mean_cross_cosine, s.mean_cross_cosine);
    }

    #[test]
    fn unmatched_pattern_warns() {
        let key = "blocks.0.attn.q_proj.weight";
        let c = ckpt(&[(key, &[2], vec![1.0, 2.0])]);
        let d = diagnose(&c, &c, &c, &ModuleKeySchema::preset(SchemaPreset::Llama), 1e-8).unwrap();
        assert_eq!(d.rows[0].layer, NO_LAYER);
        assert_eq!(d.rows[0].residual_norm_ml, 0.0);
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn export_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let row = HeatmapRow {
            layer: 1,
            module: "attn.q".into(),
            residual_norm_ml: 1.0 / 3.0,
            residual_norm_mm: 2.0,
            mean_dir_dev_ml: Some(0.125),
            mean_dir_dev_mm: None,
            mean_cross_cosine: Some(-0.5),
        };
        let csv_path = dir.path().join("h.csv");
        export_csv(std::slice::from_ref(&row), &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], "1,attn.q,3.33333333e-1,2.00000000e0,1.25000000e-1,,-5.00000000e-1");

        let json_path = dir.path().join("h.json");
        export_json(std::slice::from_ref(&row), &json_path).unwrap();
        let back: Vec<HeatmapRow> = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back, vec![row]);

        assert!(export_csv(&[], &csv_path).is_err());
        assert!(export_json(&[], &json_path).is_err());
    }

    #[test]
    fn schema_json() {
        let s = ModuleKeySchema::preset(SchemaPreset::Qwen2);
        let back: ModuleKeySchema = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"layer_index_pattern": "*layers.*", "module_labels": []}"#;
        assert!(serde_json::from_str::<ModuleKeySchema>(bad).is_err());
    }
}

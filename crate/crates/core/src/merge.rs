//! The column-wise merge rule and checkpoint assembly.
//!
//! For a 2D tensor the merged column is
//! `W̃[:, j] = W_N[:, j] + ω_ml[j]·Δ_ml[:, j] + ω_mm[j]·Δ_mm[:, j]`, where the
//! weights come from ranking magnitude and direction deviations of each
//! source against the base. 1D tensors use element-wise absolute deviations
//! instead. Weights depend only on the tensor's own values, so tensors merge
//! independently and in parallel.

use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineParams};
use crate::error::{Error, Result};
use crate::geometry::{ColumnStats, DEFAULT_EPSILON};
use crate::salience::{
    aggregate_branches, elementwise_salience, estimate_salience, AggregationKind, EstimatorKind,
    SalienceWeights,
};
use crate::scope::ScopeFilter;
use crate::store::{
    align_triple, AlignPolicy, AlignedTriple, AlignmentReport, Checkpoint, DType, HighRankPolicy,
    PassThroughReason, Role, ShapePolicy, TensorRecord,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    #[default]
    Dim3,
    TaskArithmetic,
    Dare,
    Ties,
    Breadcrumbs,
}

impl MergeMethod {
    pub fn is_baseline(self) -> bool {
        self != MergeMethod::Dim3
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Dim3 => "dim3",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Dare => "dare",
            MergeMethod::Ties => "ties",
            MergeMethod::Breadcrumbs => "breadcrumbs",
        })
    }
}

/// Storage type of merged tensors. Pass-through tensors always keep the
/// anchor's bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDtype {
    #[default]
    MatchAnchor,
    F32,
}

/// Everything that determines a merge run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Only used by `dim3`.
    pub estimator: EstimatorKind,
    /// Only used by `dim3`.
    pub aggregation: AggregationKind,
    pub epsilon: f64,
    pub scope: ScopeFilter,
    pub shape_policy: ShapePolicy,
    pub high_rank: HighRankPolicy,
    pub seed: u64,
    /// Present exactly when `method` is a baseline (after [`MergeConfig::resolved`]).
    pub baseline: Option<BaselineParams>,
    pub output_dtype: OutputDtype,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Dim3,
            estimator: EstimatorKind::Rank,
            aggregation: AggregationKind::Average,
            epsilon: DEFAULT_EPSILON,
            scope: ScopeFilter::full(),
            shape_policy: ShapePolicy::Strict,
            high_rank: HighRankPolicy::Reject,
            seed: 0,
            baseline: None,
            output_dtype: OutputDtype::MatchAnchor,
        }
    }
}

impl MergeConfig {
    pub fn with_method(method: MergeMethod) -> Self {
        Self {
            method,
            ..Default::default()
        }
        .resolved()
        .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        self.aggregation.validate()?;
        if let Some(p) = &self.baseline {
            p.validate()?;
        }
        Ok(())
    }

    /// Validated copy with baseline parameters filled in for baseline methods
    /// and dropped for `dim3`.
    pub fn resolved(mut self) -> Result<Self> {
        self.baseline = if self.method.is_baseline() {
            Some(self.baseline.unwrap_or_default())
        } else {
            None
        };
        self.validate()?;
        Ok(self)
    }

    pub fn baseline_params(&self) -> BaselineParams {
        self.baseline.unwrap_or_default()
    }

    pub fn align_policy(&self) -> AlignPolicy {
        AlignPolicy {
            shape: self.shape_policy,
            high_rank: self.high_rank,
        }
    }
}

/// Applies per-column weights to the two residuals around `base`.
fn add_update(b: f32, update: f32) -> f32 {
    // keeps base bits (including -0.0) when nothing is added
    if update == 0.0 {
        b
    } else {
        b + update
    }
}

/// Column-wise merge of one matrix triple.
pub fn dim3_matrix(
    base: ArrayView2<f32>,
    ml: ArrayView2<f32>,
    mm: ArrayView2<f32>,
    estimator: EstimatorKind,
    aggregation: AggregationKind,
    epsilon: f64,
) -> Result<(Array2<f32>, SalienceWeights)> {
    let stats = ColumnStats::gather(base, ml, mm)?;
    let (mag_ml, mag_mm) = stats.magnitude_deviations();
    let (dir_ml, dir_mm) = stats.direction_deviations(epsilon);
    let (s_mag_ml, _) = estimate_salience(&mag_ml, &mag_mm, estimator, epsilon)?;
    let (s_dir_ml, _) = estimate_salience(&dir_ml, &dir_mm, estimator, epsilon)?;
    let weights = aggregate_branches(&s_mag_ml, &s_dir_ml, aggregation)?;

    let w_ml: Vec<f32> = weights.omega_ml.iter().map(|&w| w as f32).collect();
    let w_mm: Vec<f32> = weights.omega_mm.iter().map(|&w| w as f32).collect();
    let mut out = base.to_owned();
    for ((mut ro, rl), rm) in out.rows_mut().into_iter().zip(ml.rows()).zip(mm.rows()) {
        for j in 0..ro.len() {
            let b = ro[j];
            let update = w_ml[j] * (rl[j] - b) + w_mm[j] * (rm[j] - b);
            ro[j] = add_update(b, update);
        }
    }
    Ok((out, weights))
}

/// Element-wise merge of one vector triple.
pub fn dim3_vector(
    base: &[f32],
    ml: &[f32],
    mm: &[f32],
    estimator: EstimatorKind,
    epsilon: f64,
) -> Result<(Vec<f32>, SalienceWeights)> {
    if base.len() != ml.len() || base.len() != mm.len() {
        return Err(Error::Dimension(format!(
            "vector lengths {} / {} / {}",
            base.len(),
            ml.len(),
            mm.len()
        )));
    }
    let dev = |src: &[f32]| -> Vec<f64> {
        src.iter().zip(base).map(|(&s, &b)| (f64::from(s) - f64::from(b)).abs()).collect()
    };
    let weights = elementwise_salience(&dev(ml), &dev(mm), estimator, epsilon)?;
    let out = base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let update = weights.omega_ml[i] as f32 * (ml[i] - b) + weights.omega_mm[i] as f32 * (mm[i] - b);
            add_update(b, update)
        })
        .collect();
    Ok((out, weights))
}

fn matrix_view<'v>(v: &'v [f32], rows: usize, cols: usize, name: &str) -> Result<ArrayView2<'v, f32>> {
    ArrayView2::from_shape((rows, cols), v).map_err(|e| Error::Dimension(format!("{name}: {e}")))
}

/// Merged values of one triple, before encoding.
#[derive(Debug, Clone)]
pub struct MergedTensor {
    pub values: Vec<f32>,
    /// Source weights, for `dim3` only.
    pub weights: Option<SalienceWeights>,
}

/// Source tag mixed into DARE seeds so the two residuals get independent masks.
const DARE_STREAM_ML: u64 = 0x6d6c;
const DARE_STREAM_MM: u64 = 0x6d6d;

/// Merges one aligned triple with the configured method.
pub fn merge_tensor(triple: &AlignedTriple<'_>, cfg: &MergeConfig) -> Result<MergedTensor> {
    let shape = triple.shape().to_vec();
    let base = triple.base.to_f32();
    let ml = triple.ml.to_f32();
    let mm = triple.mm.to_f32();

    if cfg.method == MergeMethod::Dim3 {
        let (values, weights) = match shape.as_slice() {
            [_] => dim3_vector(&base, &ml, &mm, cfg.estimator, cfg.epsilon)?,
            &[rows, cols] => {
                let (out, w) = dim3_matrix(
                    matrix_view(&base, rows, cols, &triple.name)?,
                    matrix_view(&ml, rows, cols, &triple.name)?,
                    matrix_view(&mm, rows, cols, &triple.name)?,
                    cfg.estimator,
                    cfg.aggregation,
                    cfg.epsilon,
                )?;
                (out.into_raw_vec_and_offset().0, w)
            }
            other => {
                return Err(Error::UnsupportedRank {
                    name: triple.name.clone(),
                    rank: other.len(),
                })
            }
        };
        return Ok(MergedTensor {
            values,
            weights: Some(weights),
        });
    }

    let delta = |src: &[f32]| -> Vec<f32> { src.iter().zip(&base).map(|(s, b)| s - b).collect() };
    let (d_ml, d_mm) = (delta(&ml), delta(&mm));
    let p = cfg.baseline_params();
    let values = match cfg.method {
        MergeMethod::TaskArithmetic => baselines::task_arithmetic(&base, &d_ml, &d_mm, p.lambda)?,
        MergeMethod::Dare => {
            let a = baselines::dare_transform(&d_ml, p.dare_drop_p, cfg.seed ^ DARE_STREAM_ML, &triple.name)?;
            let b = baselines::dare_transform(&d_mm, p.dare_drop_p, cfg.seed ^ DARE_STREAM_MM, &triple.name)?;
            baselines::task_arithmetic(&base, &a, &b, p.lambda)?
        }
        MergeMethod::Ties => baselines::ties_merge(&base, &d_ml, &d_mm, p.ties_density, p.lambda)?,
        MergeMethod::Breadcrumbs => {
            let (beta, gamma) = (p.breadcrumbs_beta, p.breadcrumbs_gamma);
            let a = baselines::breadcrumbs_transform(&d_ml, beta, gamma)?;
            let b = baselines::breadcrumbs_transform(&d_mm, beta, gamma)?;
            baselines::task_arithmetic(&base, &a, &b, p.lambda)?
        }
        MergeMethod::Dim3 => unreachable!(),
    };
    Ok(MergedTensor { values, weights: None })
}

fn output_dtype(triple: &AlignedTriple<'_>, cfg: &MergeConfig) -> DType {
    match cfg.output_dtype {
        OutputDtype::MatchAnchor => triple.mm.dtype(),
        OutputDtype::F32 => DType::F32,
    }
}

fn require_rank(triple: &AlignedTriple<'_>, rank: usize) -> Result<()> {
    if triple.shape().len() == rank {
        Ok(())
    } else {
        Err(Error::UnsupportedRank {
            name: triple.name.clone(),
            rank: triple.shape().len(),
        })
    }
}

/// Column-wise merge of a 2D triple into a record of the output dtype.
pub fn merge_matrix(triple: &AlignedTriple<'_>, cfg: &MergeConfig) -> Result<TensorRecord> {
    require_rank(triple, 2)?;
    let m = merge_tensor(triple, cfg)?;
    TensorRecord::from_f32(&*triple.name, triple.shape().to_vec(), &m.values, output_dtype(triple, cfg))
}

/// Element-wise merge of a 1D triple into a record of the output dtype.
pub fn merge_vector(triple: &AlignedTriple<'_>, cfg: &MergeConfig) -> Result<TensorRecord> {
    require_rank(triple, 1)?;
    let m = merge_tensor(triple, cfg)?;
    TensorRecord::from_f32(&*triple.name, triple.shape().to_vec(), &m.values, output_dtype(triple, cfg))
}

/// Summary of the multilingual weights of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl OmegaStats {
    fn of(w: &[f64]) -> Self {
        Self {
            mean: w.iter().sum::<f64>() / w.len() as f64,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: w.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorAction {
    Merged,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub action: TensorAction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<MergeMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<PassThroughReason>,
    pub shape: Vec<usize>,
    pub dtype: DType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_ml: Option<OmegaStats>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: MergeMethod,
    pub seed: u64,
    pub merged_count: usize,
    pub passthrough_count: usize,
    /// Mean multilingual weight over every merged column and element.
    pub mean_omega_ml: Option<f64>,
    pub output_digest: String,
    pub elapsed_ms: f64,
    pub alignment: AlignmentReport,
    pub tensors: Vec<TensorReport>,
}

/// Merges the shared backbone and writes it into a copy of the anchor.
///
/// Tensors outside the shared backbone or outside the scope are copied from
/// the anchor verbatim. Runs on the current rayon pool; the output does not
/// depend on the pool size.
pub fn merge_checkpoint(
    base: &Checkpoint,
    ml: &Checkpoint,
    anchor: &Checkpoint,
    cfg: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let (triples, alignment) = align_triple(base, ml, anchor, &cfg.scope, cfg.align_policy())?;

    let merged: Vec<(TensorRecord, TensorReport)> = triples
        .par_iter()
        .map(|t| -> Result<_> {
            let t0 = Instant::now();
            let m = merge_tensor(t, cfg)?;
            let dtype = output_dtype(t, cfg);
            let block = TensorRecord::from_f32(&*t.name, t.shape().to_vec(), &m.values, dtype)?;
            let record = match &t.anchor_shape {
                None => block,
                Some(_) => {
                    let mut full = anchor.get(&t.name).expect("aligned key in anchor").cast(dtype);
                    full.overwrite_leading_block(&block);
                    full
                }
            };
            let report = TensorReport {
                name: t.name.clone(),
                action: TensorAction::Merged,
                method: Some(cfg.method),
                reason: None,
                shape: record.shape().to_vec(),
                dtype,
                omega_ml: m.weights.as_ref().map(|w| OmegaStats::of(&w.omega_ml)),
                elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            Ok((record, report))
        })
        .collect::<Result<_>>()?;

    let mut out = anchor.clone().with_role(Role::Merged);
    let mut tensors = Vec::with_capacity(anchor.len());
    let (mut omega_sum, mut omega_n) = (0.0f64, 0usize);
    for (record, report) in merged {
        if let Some(s) = &report.omega_ml {
            omega_sum += s.mean * s.count as f64;
            omega_n += s.count;
        }
        out.put(record);
        tensors.push(report);
    }
    for p in &alignment.passthrough {
        let r = anchor.get(&p.name).expect("pass-through key in anchor");
        tensors.push(TensorReport {
            name: p.name.clone(),
            action: TensorAction::PassThrough,
            method: None,
            reason: Some(p.reason),
            shape: r.shape().to_vec(),
            dtype: r.dtype(),
            omega_ml: None,
            elapsed_ms: 0.0,
        });
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));

    let report = MergeReport {
        method: cfg.method,
        seed: cfg.seed,
        merged_count: triples.len(),
        passthrough_count: alignment.passthrough.len(),
        mean_omega_ml: (omega_n > 0).then(|| omega_sum / omega_n as f64),
        output_digest: out.digest(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        alignment,
        tensors,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::salience::sigmoid;
    use std::borrow::Cow;

    fn triple<'a>(shape: &[usize], b: &[f32], l: &[f32], m: &[f32]) -> AlignedTriple<'a> {
        let rec = |v: &[f32]| Cow::Owned(TensorRecord::from_f32("t", shape.to_vec(), v, DType::F32).unwrap());
        AlignedTriple {
            name: "t".into(),
            base: rec(b),
            ml: rec(l),
            mm: rec(m),
            anchor_shape: None,
        }
    }

    #[test]
    fn zero_residuals_return_base() {
        let b = [1.0f32, -0.0, 2.5, 3.0];
        let t = triple(&[2, 2], &b, &b, &b);
        let out = merge_matrix(&t, &MergeConfig::default()).unwrap();
        assert_eq!(out.bytes(), t.base.bytes());
    }

    #[test]
    fn identical_residuals_split_evenly() {
        let b = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s: Vec<f32> = b.iter().enumerate().map(|(i, v)| v + 0.1 * i as f32 - 0.2).collect();
        let t = triple(&[3, 2], &b, &s, &s);
        let m = merge_tensor(&t, &MergeConfig::default()).unwrap();
        assert!(m.weights.unwrap().omega_ml.iter().all(|&w| w == 0.5));
        for (o, e) in m.values.iter().zip(&s) {
            assert!((o - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn vector_hand_trace() {
        let t = triple(&[2], &[0.5, -1.0], &[1.5, -1.0], &[0.5, 0.0]);
        let out = merge_vector(&t, &MergeConfig::default()).unwrap().to_f32();
        let s = sigmoid(0.5) as f32;
        assert!((out[0] - (0.5 + s)).abs() < 1e-6);
        assert!((out[1] - (-1.0 + s)).abs() < 1e-6);
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let t = triple(&[2], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert!(merge_matrix(&t, &MergeConfig::default()).is_err());
    }

    #[test]
    fn config_resolution() {
        let c = MergeConfig::with_method(MergeMethod::Dare);
        assert_eq!(c.baseline, Some(BaselineParams::default()));
        let c = MergeConfig {
            baseline: Some(BaselineParams::default()),
            ..Default::default()
        }
        .resolved()
        .unwrap();
        assert_eq!(c.baseline, None);
        let bad = MergeConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.resolved().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = MergeConfig {
            method: MergeMethod::Ties,
            aggregation: AggregationKind::MagWeighted { lambda: 0.6 },
            ..Default::default()
        }
        .resolved()
        .unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: MergeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let partial: MergeConfig = serde_json::from_str(r#"{"method": "dare", "seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert!(serde_json::from_str::<MergeConfig>(r#"{"methd": "dare"}"#).is_err());
    }
}

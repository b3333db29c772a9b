//! Turning per-column deviations into per-column source weights.
//!
//! Each branch (magnitude, direction) scores the two sources against each
//! other column by column; the branch scores are then aggregated into a
//! weight pair `(ω_ml, ω_mm)` on the 2-simplex.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How raw deviations are normalised before the two sources are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Within-source average ranks divided by length, then a two-way softmax.
    #[default]
    Rank,
    /// Two-way softmax on the raw deviations.
    Raw,
    /// Per-source standardisation, then softmax.
    Zscore,
    /// Per-source min-max scaling, then softmax.
    Minmax,
    /// Weights proportional to the raw deviations, no softmax.
    Ratio,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Rank,
        EstimatorKind::Raw,
        EstimatorKind::Zscore,
        EstimatorKind::Minmax,
        EstimatorKind::Ratio,
    ];
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Rank => "rank",
            EstimatorKind::Raw => "raw",
            EstimatorKind::Zscore => "zscore",
            EstimatorKind::Minmax => "minmax",
            EstimatorKind::Ratio => "ratio",
        })
    }
}

pub const DEFAULT_BRANCH_LAMBDA: f64 = 0.75;

fn default_lambda() -> f64 {
    DEFAULT_BRANCH_LAMBDA
}

/// How the magnitude and direction branch scores combine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationKind {
    #[default]
    Average,
    /// `λ·s_dir + (1 − λ)·s_mag`, λ in (0.5, 1).
    DirWeighted {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// `λ·s_mag + (1 − λ)·s_dir`, λ in (0.5, 1).
    MagWeighted {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    MagOnly,
    DirOnly,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 5] = [
        AggregationKind::Average,
        AggregationKind::DirWeighted {
            lambda: DEFAULT_BRANCH_LAMBDA,
        },
        AggregationKind::MagWeighted {
            lambda: DEFAULT_BRANCH_LAMBDA,
        },
        AggregationKind::MagOnly,
        AggregationKind::DirOnly,
    ];

    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationKind::DirWeighted { lambda } | AggregationKind::MagWeighted { lambda }
                if !(lambda > 0.5 && lambda < 1.0) =>
            {
                Err(Error::Config(format!(
                    "branch weight lambda must lie in (0.5, 1), got {lambda}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Per-column source weights and the branch scores they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceWeights {
    /// Multilingual magnitude-branch scores; absent for element-wise weights.
    pub s_mag_ml: Option<Vec<f64>>,
    /// Multilingual direction-branch scores; absent for element-wise weights.
    pub s_dir_ml: Option<Vec<f64>>,
    pub omega_ml: Vec<f64>,
    pub omega_mm: Vec<f64>,
}

impl SalienceWeights {
    pub fn len(&self) -> usize {
        self.omega_ml.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega_ml.is_empty()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "deviation lengths differ: {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

/// 1-based ascending average ranks divided by the length: the largest value
/// maps to 1, ties share the mean of their positions.
pub fn rank_normalize(dev: &[f64]) -> Result<Vec<f64>> {
    let scale = 2.0 * dev.len() as f64;
    Ok(doubled_ranks(dev)?.into_iter().map(|r| r as f64 / scale).collect())
}

/// Twice the 1-based average ranks, which are always integers.
fn doubled_ranks(dev: &[f64]) -> Result<Vec<u64>> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("cannot rank an empty vector".into()));
    }
    check_finite(dev, "deviation vector")?;
    let d = dev.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| dev[a].partial_cmp(&dev[b]).expect("finite"));
    let mut out = vec![0; d];
    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && dev[order[end]] == dev[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean rank
        for &i in &order[start..end] {
            out[i] = (start + 1 + end) as u64;
        }
        start = end;
    }
    Ok(out)
}

/// Logistic function; saturates to 0 or 1 without overflow trouble.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Literal two-way softmax `(e^a, e^b) / (e^a + e^b)`, max-shifted.
pub fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Two-source salience `(σ(a − b), 1 − σ(a − b))`.
///
/// The smaller share is evaluated directly and the larger one as its
/// complement, so swapping the inputs swaps the outputs bit for bit.
pub fn salience_pair(r_ml: f64, r_mm: f64) -> (f64, f64) {
    salience_from_gap(r_ml - r_mm)
}

fn salience_from_gap(gap: f64) -> (f64, f64) {
    let small = sigmoid(-gap.abs());
    let large = 1.0 - small;
    if gap >= 0.0 {
        (large, small)
    } else {
        (small, large)
    }
}

/// Bounds of a rank-estimator branch score for `d` columns:
/// `[σ(−(d−1)/d), σ((d−1)/d)]`.
pub fn rank_score_bounds(d: usize) -> (f64, f64) {
    let g = (d as f64 - 1.0) / d as f64;
    (sigmoid(-g), sigmoid(g))
}

fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - mean) / std).collect()
    }
}

fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        vec![0.5; v.len()]
    } else {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    }
}

fn ratio_pair(a: f64, b: f64, eps: f64) -> (f64, f64) {
    let sum = a + b;
    if sum < eps {
        return (0.5, 0.5);
    }
    let small = a.min(b) / sum;
    let large = 1.0 - small;
    if a >= b {
        (large, small)
    } else {
        (small, large)
    }
}

fn pairwise(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    x.iter().zip(y).map(|(&a, &b)| salience_pair(a, b)).unzip()
}

/// Per-column salience of each source for one branch.
///
/// `eps` guards the ratio estimator's denominator.
pub fn estimate_salience(
    dev_ml: &[f64],
    dev_mm: &[f64],
    estimator: EstimatorKind,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(dev_ml, dev_mm)?;
    if dev_ml.is_empty() {
        return Err(Error::InvalidArgument("empty deviation vectors".into()));
    }
    check_finite(dev_ml, "multilingual deviations")?;
    check_finite(dev_mm, "multimodal deviations")?;
    Ok(match estimator {
        EstimatorKind::Rank => {
            // gap from integer ranks, rounded once
            let scale = 2.0 * dev_ml.len() as f64;
            doubled_ranks(dev_ml)?
                .into_iter()
                .zip(doubled_ranks(dev_mm)?)
                .map(|(a, b)| salience_from_gap((a as i64 - b as i64) as f64 / scale))
                .unzip()
        }
        EstimatorKind::Raw => pairwise(dev_ml, dev_mm),
        EstimatorKind::Zscore => pairwise(&zscore(dev_ml), &zscore(dev_mm)),
        EstimatorKind::Minmax => pairwise(&minmax(dev_ml), &minmax(dev_mm)),
        EstimatorKind::Ratio => dev_ml
            .iter()
            .zip(dev_mm)
            .map(|(&a, &b)| ratio_pair(a, b, eps))
            .unzip(),
    })
}

fn check_scores(v: &[f64], what: &str) -> Result<()> {
    match v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(bad) => Err(Error::InvalidArgument(format!("{what} score {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Combines multilingual magnitude and direction scores into `(ω_ml, ω_mm)`.
pub fn aggregate_branches(s_mag_ml: &[f64], s_dir_ml: &[f64], agg: AggregationKind) -> Result<SalienceWeights> {
    check_len(s_mag_ml, s_dir_ml)?;
    check_scores(s_mag_ml, "magnitude")?;
    check_scores(s_dir_ml, "direction")?;
    agg.validate()?;
    let combine = |mag: f64, dir: f64| match agg {
        AggregationKind::Average => (mag + dir) / 2.0,
        AggregationKind::DirWeighted { lambda } => lambda * dir + (1.0 - lambda) * mag,
        AggregationKind::MagWeighted { lambda } => lambda * mag + (1.0 - lambda) * dir,
        AggregationKind::MagOnly => mag,
        AggregationKind::DirOnly => dir,
    };
    let omega_ml: Vec<f64> = s_mag_ml.iter().zip(s_dir_ml).map(|(&m, &d)| combine(m, d)).collect();
    let omega_mm = omega_ml.iter().map(|w| 1.0 - w).collect();
    Ok(SalienceWeights {
        s_mag_ml: Some(s_mag_ml.to_vec()),
        s_dir_ml: Some(s_dir_ml.to_vec()),
        omega_ml,
        omega_mm,
    })
}

/// Single-branch weights for 1D parameters; `ω` is the salience itself.
pub fn elementwise_salience(
    dev_ml: &[f64],
    dev_mm: &[f64],
    estimator: EstimatorKind,
    eps: f64,
) -> Result<SalienceWeights> {
    let (omega_ml, omega_mm) = estimate_salience(dev_ml, dev_mm, estimator, eps)?;
    Ok(SalienceWeights {
        s_mag_ml: None,
        s_dir_ml: None,
        omega_ml,
        omega_mm,
    })
}

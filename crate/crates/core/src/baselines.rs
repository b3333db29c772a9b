//! Reference merging methods over flat residual vectors: task arithmetic,
//! DARE, TIES-Merging and Model Breadcrumbs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Hyperparameters shared by the baseline methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    /// Scale applied to the summed (or merged) residual.
    pub lambda: f64,
    /// DARE drop probability, in `[0, 1)`.
    pub dare_drop_p: f64,
    /// TIES keep fraction, in `(0, 1]`.
    pub ties_density: f64,
    /// Breadcrumbs fraction of smallest-magnitude entries removed.
    pub breadcrumbs_beta: f64,
    /// Breadcrumbs fraction of largest-magnitude entries removed.
    pub breadcrumbs_gamma: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            dare_drop_p: 0.9,
            ties_density: 0.2,
            breadcrumbs_beta: 0.85,
            breadcrumbs_gamma: 0.01,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        check_drop_p(self.dare_drop_p)?;
        check_density(self.ties_density)?;
        check_breadcrumbs(self.breadcrumbs_beta, self.breadcrumbs_gamma)
    }
}

fn check_drop_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("DARE drop probability must lie in [0, 1), got {p}")))
    }
}

fn check_density(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("TIES density must lie in (0, 1], got {k}")))
    }
}

fn check_breadcrumbs(beta: f64, gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) && (0.0..1.0).contains(&gamma) && beta + gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "breadcrumbs needs beta, gamma in [0, 1) with beta + gamma < 1, got {beta} and {gamma}"
        )))
    }
}

fn check_lengths(base: &[f32], a: &[f32], b: &[f32]) -> Result<()> {
    if base.len() == a.len() && base.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "residual lengths {} / {} / {}",
            base.len(),
            a.len(),
            b.len()
        )))
    }
}

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Count `fraction · n`, snapping to the nearest integer when the product is
/// within rounding noise of it.
fn fraction_count(fraction: f64, n: usize, round_up: bool) -> usize {
    let x = fraction * n as f64;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else if round_up {
        x.ceil()
    } else {
        x.floor()
    };
    (c as usize).min(n)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TieOrder {
    LowIndexFirst,
    HighIndexFirst,
}

/// Marks the `count` entries of largest (`largest = true`) or smallest `abs`
/// value; entries equal to the threshold are taken in `ties` index order.
fn extreme_mask(abs: &[f32], count: usize, largest: bool, ties: TieOrder) -> Vec<bool> {
    let n = abs.len();
    if count == 0 {
        return vec![false; n];
    }
    if count >= n {
        return vec![true; n];
    }
    let mut scratch = abs.to_vec();
    let pos = if largest { n - count } else { count - 1 };
    let (_, &mut threshold, _) = scratch.select_nth_unstable_by(pos, f32::total_cmp);
    let strictly = |a: f32| if largest { a > threshold } else { a < threshold };
    let clear = abs.iter().filter(|&&a| strictly(a)).count();
    let mut need = count - clear;

    let mut mask: Vec<bool> = abs.iter().map(|&a| strictly(a)).collect();
    let mut take = |i: usize| {
        if need > 0 && abs[i] == threshold {
            mask[i] = true;
            need -= 1;
        }
    };
    match ties {
        TieOrder::LowIndexFirst => (0..n).for_each(&mut take),
        TieOrder::HighIndexFirst => (0..n).rev().for_each(&mut take),
    }
    mask
}

/// `base + λ·(Δ_ml + Δ_mm)`.
pub fn task_arithmetic(base: &[f32], delta_ml: &[f32], delta_mm: &[f32], lambda: f64) -> Result<Vec<f32>> {
    check_lengths(base, delta_ml, delta_mm)?;
    let lambda = lambda as f32;
    Ok(base
        .iter()
        .zip(delta_ml)
        .zip(delta_mm)
        .map(|((&b, &x), &y)| b + lambda * (x + y))
        .collect())
}

/// Drops each entry with probability `p` and rescales survivors by
/// `1 / (1 − p)`.
///
/// The keep decision for entry `i` depends only on `(seed, tensor_name, i)`.
pub fn dare_transform(delta: &[f32], p: f64, seed: u64, tensor_name: &str) -> Result<Vec<f32>> {
    check_drop_p(p)?;
    if p == 0.0 {
        return Ok(delta.to_vec());
    }
    let rng = CounterRng::new(seed, tensor_name);
    let keep = 1.0 - p;
    Ok(delta
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if rng.uniform(i as u64) >= p {
                (f64::from(v) / keep) as f32
            } else {
                0.0
            }
        })
        .collect())
}

/// Keeps the `⌈k·n⌉` largest-magnitude entries (lower index wins ties) and
/// zeroes the rest.
pub fn ties_trim(delta: &[f32], density: f64) -> Result<Vec<f32>> {
    check_density(density)?;
    check_finite(delta, "TIES residual")?;
    let count = fraction_count(density, delta.len(), true);
    let abs: Vec<f32> = delta.iter().map(|v| v.abs()).collect();
    let mask = extreme_mask(&abs, count, true, TieOrder::LowIndexFirst);
    Ok(delta
        .iter()
        .zip(mask)
        .map(|(&v, keep)| if keep { v } else { 0.0 })
        .collect())
}

/// Elects a sign per coordinate from the sum of trimmed values (zero sum
/// elects positive) and averages the trimmed values that carry that sign.
pub fn ties_disjoint_mean(trimmed: &[&[f32]]) -> Vec<f32> {
    let n = trimmed.first().map_or(0, |t| t.len());
    (0..n)
        .map(|i| {
            let sum: f64 = trimmed.iter().map(|t| f64::from(t[i])).sum();
            let positive = sum >= 0.0;
            let (mut acc, mut count) = (0.0f64, 0u32);
            for t in trimmed {
                let v = t[i];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    acc += f64::from(v);
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                (acc / f64::from(count)) as f32
            }
        })
        .collect()
}

/// TIES-Merging of the two residuals around `base`.
pub fn ties_merge(
    base: &[f32],
    delta_ml: &[f32],
    delta_mm: &[f32],
    density: f64,
    lambda: f64,
) -> Result<Vec<f32>> {
    check_lengths(base, delta_ml, delta_mm)?;
    let a = ties_trim(delta_ml, density)?;
    let b = ties_trim(delta_mm, density)?;
    let merged = ties_disjoint_mean(&[&a, &b]);
    let lambda = lambda as f32;
    Ok(base.iter().zip(merged).map(|(&w, d)| w + lambda * d).collect())
}

/// Zeroes the `⌊β·n⌋` smallest and `⌊γ·n⌋` largest entries by magnitude.
///
/// Entries are ordered by `(|v|, index)`: among equal magnitudes the lower
/// index counts as smaller, so it is the first to go at the bottom and the
/// last to go at the top.
pub fn breadcrumbs_transform(delta: &[f32], beta: f64, gamma: f64) -> Result<Vec<f32>> {
    check_breadcrumbs(beta, gamma)?;
    check_finite(delta, "breadcrumbs residual")?;
    let n = delta.len();
    let abs: Vec<f32> = delta.iter().map(|v| v.abs()).collect();
    let low = extreme_mask(&abs, fraction_count(beta, n, false), false, TieOrder::LowIndexFirst);
    let high = extreme_mask(&abs, fraction_count(gamma, n, false), true, TieOrder::HighIndexFirst);
    Ok(delta
        .iter()
        .zip(low.iter().zip(&high))
        .map(|(&v, (&lo, &hi))| if lo || hi { 0.0 } else { v })
        .collect())
}

//! Column-wise magnitude/direction geometry of weight matrices.
//!
//! A "column" of a stored `[d_out, d_in]` tensor is the slice along axis 0 at
//! a fixed axis-1 index. Norms and dot products accumulate in `f64` whatever
//! the element type; summation runs sequentially over rows, so results do not
//! depend on scheduling.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::AlignedTriple;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Element type usable for geometry: `f32` (working precision) or `f64`.
pub trait Real: Float + Debug + Send + Sync + 'static {
    fn widen(self) -> f64;
    fn narrow(x: f64) -> Self;
}

impl Real for f32 {
    fn widen(self) -> f64 {
        f64::from(self)
    }
    fn narrow(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn widen(self) -> f64 {
        self
    }
    fn narrow(x: f64) -> Self {
        x
    }
}

fn check_finite<T: Real>(w: ArrayView2<T>, what: &str) -> Result<()> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{a:?} vs {b:?}")))
    }
}

/// Euclidean norm of every column.
pub fn column_norms<T: Real>(w: ArrayView2<T>) -> Vec<f64> {
    column_sq_norms(w).into_iter().map(f64::sqrt).collect()
}

/// Squared Euclidean norm of every column.
pub fn column_sq_norms<T: Real>(w: ArrayView2<T>) -> Vec<f64> {
    let mut acc = vec![0.0f64; w.ncols()];
    for row in w.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            let x = x.widen();
            *a += x * x;
        }
    }
    acc
}

/// Dot product of matching columns of `a` and `b` (same shape).
pub fn column_dots<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Vec<f64> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = vec![0.0f64; a.ncols()];
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        for ((s, &x), &y) in acc.iter_mut().zip(ra).zip(rb) {
            *s += x.widen() * y.widen();
        }
    }
    acc
}

/// Cosine from a dot product and two squared norms; 0 when either norm is
/// below `eps`.
///
/// Dividing by `sqrt(‖a‖²·‖b‖²)` makes the cosine of a column with itself
/// exactly 1.
pub fn guarded_cosine(dot: f64, sq_a: f64, sq_b: f64, eps: f64) -> f64 {
    if sq_a.sqrt() < eps || sq_b.sqrt() < eps {
        0.0
    } else {
        (dot / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Per-column magnitudes and ε-stabilised unit directions of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDecomposition<T> {
    pub magnitudes: Array1<T>,
    pub directions: Array2<T>,
    pub epsilon: f64,
}

impl<T: Real> ColumnDecomposition<T> {
    pub fn ncols(&self) -> usize {
        self.magnitudes.len()
    }

    /// Column `j` rebuilt without the stabiliser, `D[:, j] * (m_j + ε)`.
    pub fn raw_column(&self, j: usize) -> Array1<T> {
        let scale = self.magnitudes[j] + T::narrow(self.epsilon);
        self.directions.column(j).mapv(|d| d * scale)
    }
}

/// Splits each column into `m_j = ‖W[:, j]‖` and `D[:, j] = W[:, j] / (m_j + ε)`.
pub fn decompose<T: Real>(w: ArrayView2<T>, epsilon: f64) -> Result<ColumnDecomposition<T>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    check_finite(w, "matrix to decompose")?;
    let norms = column_norms(w);
    let magnitudes: Array1<T> = norms.iter().map(|&m| T::narrow(m)).collect();
    let scales: Array1<T> = norms.iter().map(|&m| T::narrow(1.0 / (m + epsilon))).collect();
    let mut directions = w.to_owned();
    for mut row in directions.rows_mut() {
        row.zip_mut_with(&scales, |d, &s| *d = *d * s);
    }
    Ok(ColumnDecomposition {
        magnitudes,
        directions,
        epsilon,
    })
}

/// `|m_k(j) − m_N(j)|` per column.
pub fn magnitude_deviation<T: Real>(
    dec_k: &ColumnDecomposition<T>,
    dec_n: &ColumnDecomposition<T>,
) -> Result<Array1<T>> {
    same_shape(dec_k.magnitudes.shape(), dec_n.magnitudes.shape())?;
    Ok(ndarray::Zip::from(&dec_k.magnitudes)
        .and(&dec_n.magnitudes)
        .map_collect(|&a, &b| (a - b).abs()))
}

/// `1 − cos(D_k[:, j], D_N[:, j])` per column, in `[0, 2]`.
///
/// Columns whose magnitude in either decomposition is below ε get cosine 0,
/// hence deviation 1.
pub fn direction_deviation<T: Real>(
    dec_k: &ColumnDecomposition<T>,
    dec_n: &ColumnDecomposition<T>,
) -> Result<Array1<T>> {
    same_shape(dec_k.directions.shape(), dec_n.directions.shape())?;
    let eps = dec_k.epsilon.max(dec_n.epsilon);
    let dots = column_dots(dec_k.directions.view(), dec_n.directions.view());
    let nk = column_sq_norms(dec_k.directions.view());
    let nn = column_sq_norms(dec_n.directions.view());
    Ok((0..dots.len())
        .map(|j| {
            let cos = if dec_k.magnitudes[j].widen() < eps || dec_n.magnitudes[j].widen() < eps {
                0.0
            } else {
                guarded_cosine(dots[j], nk[j], nn[j], 0.0)
            };
            T::narrow(1.0 - cos)
        })
        .collect())
}

/// Cosine between the two residuals at each column, in `[−1, 1]`.
pub fn cross_alignment<T: Real>(
    delta_ml: ArrayView2<T>,
    delta_mm: ArrayView2<T>,
    epsilon: f64,
) -> Result<Array1<T>> {
    same_shape(delta_ml.shape(), delta_mm.shape())?;
    let dots = column_dots(delta_ml, delta_mm);
    let na = column_sq_norms(delta_ml);
    let nb = column_sq_norms(delta_mm);
    Ok((0..dots.len())
        .map(|j| T::narrow(guarded_cosine(dots[j], na[j], nb[j], epsilon)))
        .collect())
}

/// Both sides of the radial/angular split of a column's squared residual:
/// `‖W_k − W_N‖² = (δ_mag)² + 2·m_k·m_N·δ_dir`, with ε ignored.
///
/// The left side is computed from the raw columns, the right side from the
/// decomposition, each in the decomposition's element type.
pub fn residual_split<T: Real>(
    dec_k: &ColumnDecomposition<T>,
    dec_n: &ColumnDecomposition<T>,
    j: usize,
) -> Result<(f64, f64)> {
    same_shape(dec_k.directions.shape(), dec_n.directions.shape())?;
    if j >= dec_k.ncols() {
        return Err(Error::Dimension(format!("column {j} out of range {}", dec_k.ncols())));
    }
    let wk = dec_k.raw_column(j);
    let wn = dec_n.raw_column(j);
    let lhs: f64 = wk
        .iter()
        .zip(wn.iter())
        .map(|(&a, &b)| (a - b).widen().powi(2))
        .sum();

    let mk = dec_k.magnitudes[j];
    let mn = dec_n.magnitudes[j];
    let dk = dec_k.directions.column(j);
    let dn = dec_n.directions.column(j);
    let cos = cosine_of(dk, dn);
    let dmag = (mk - mn).abs();
    let ddir = T::one() - T::narrow(cos);
    let two = T::one() + T::one();
    let rhs = dmag * dmag + two * mk * mn * ddir;
    Ok((lhs, rhs.widen()))
}

fn cosine_of<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.widen(), y.widen());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    guarded_cosine(dot, na, nb, 0.0)
}

/// Per-column norms and base dot products for a base matrix and two sources,
/// gathered in one pass without materialising directions or residuals.
///
/// Cosines between directions equal cosines between raw columns, so the
/// deviations derived here match [`magnitude_deviation`] and
/// [`direction_deviation`] up to rounding.
#[derive(Debug, Clone)]
pub struct ColumnStats {
    /// Squared column norms.
    pub sq_base: Vec<f64>,
    pub sq_ml: Vec<f64>,
    pub sq_mm: Vec<f64>,
    pub dot_ml_base: Vec<f64>,
    pub dot_mm_base: Vec<f64>,
}

impl ColumnStats {
    pub fn gather(base: ArrayView2<f32>, ml: ArrayView2<f32>, mm: ArrayView2<f32>) -> Result<Self> {
        same_shape(base.shape(), ml.shape())?;
        same_shape(base.shape(), mm.shape())?;
        let d = base.ncols();
        let mut s = ColumnStats {
            sq_base: vec![0.0; d],
            sq_ml: vec![0.0; d],
            sq_mm: vec![0.0; d],
            dot_ml_base: vec![0.0; d],
            dot_mm_base: vec![0.0; d],
        };
        let mut finite = true;
        for ((rb, rl), rm) in base.rows().into_iter().zip(ml.rows()).zip(mm.rows()) {
            for j in 0..d {
                let (b, l, m) = (f64::from(rb[j]), f64::from(rl[j]), f64::from(rm[j]));
                finite &= b.is_finite() && l.is_finite() && m.is_finite();
                s.sq_base[j] += b * b;
                s.sq_ml[j] += l * l;
                s.sq_mm[j] += m * m;
                s.dot_ml_base[j] += l * b;
                s.dot_mm_base[j] += m * b;
            }
        }
        if !finite {
            return Err(Error::NonFinite("matrix triple".into()));
        }
        Ok(s)
    }

    pub fn magnitude_deviations(&self) -> (Vec<f64>, Vec<f64>) {
        let dev = |sk: &[f64]| -> Vec<f64> {
            sk.iter().zip(&self.sq_base).map(|(a, b)| (a.sqrt() - b.sqrt()).abs()).collect()
        };
        (dev(&self.sq_ml), dev(&self.sq_mm))
    }

    pub fn direction_deviations(&self, epsilon: f64) -> (Vec<f64>, Vec<f64>) {
        let dev = |dots: &[f64], sk: &[f64]| -> Vec<f64> {
            dots.iter()
                .zip(sk)
                .zip(&self.sq_base)
                .map(|((&dot, &a), &b)| 1.0 - guarded_cosine(dot, a, b, epsilon))
                .collect()
        };
        (dev(&self.dot_ml_base, &self.sq_ml), dev(&self.dot_mm_base, &self.sq_mm))
    }
}

/// Residual heterogeneity summary for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityStats {
    pub residual_norm_ml: f64,
    pub residual_norm_mm: f64,
    /// Column means; absent for 1D tensors.
    pub mean_dir_dev_ml: Option<f64>,
    pub mean_dir_dev_mm: Option<f64>,
    pub mean_cross_cosine: Option<f64>,
    pub columns: usize,
    pub elements: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Residual norms, mean reorientation and mean cross-residual alignment.
pub fn tensor_stats(triple: &AlignedTriple<'_>, epsilon: f64) -> Result<HeterogeneityStats> {
    let shape = triple.shape().to_vec();
    let base = triple.base.to_f32();
    let ml = triple.ml.to_f32();
    let mm = triple.mm.to_f32();
    // f32 differences are exact in f64
    let residual = |src: &[f32]| -> Vec<f64> {
        src.iter().zip(&base).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect()
    };
    let (delta_ml, delta_mm) = (residual(&ml), residual(&mm));
    let frob = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut stats = HeterogeneityStats {
        residual_norm_ml: frob(&delta_ml),
        residual_norm_mm: frob(&delta_mm),
        mean_dir_dev_ml: None,
        mean_dir_dev_mm: None,
        mean_cross_cosine: None,
        columns: 0,
        elements: base.len(),
    };
    match shape.as_slice() {
        [_] => {}
        &[rows, cols] => {
            let view = |v: &[f32]| -> Result<Array2<f32>> {
                Array2::from_shape_vec((rows, cols), v.to_vec())
                    .map_err(|e| Error::Dimension(e.to_string()))
            };
            let view64 = |v: Vec<f64>| -> Result<Array2<f64>> {
                Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Dimension(e.to_string()))
            };
            let (b, l, m) = (view(&base)?, view(&ml)?, view(&mm)?);
            let cs = ColumnStats::gather(b.view(), l.view(), m.view())?;
            let (dir_ml, dir_mm) = cs.direction_deviations(epsilon);
            let cross = cross_alignment(view64(delta_ml)?.view(), view64(delta_mm)?.view(), epsilon)?.to_vec();
            stats.mean_dir_dev_ml = Some(mean(&dir_ml));
            stats.mean_dir_dev_mm = Some(mean(&dir_mm));
            stats.mean_cross_cosine = Some(mean(&cross));
            stats.columns = cols;
        }
        other => {
            return Err(Error::UnsupportedRank {
                name: triple.name.clone(),
                rank: other.len(),
            })
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn three_four_five() {
        let w = array![[3.0f64], [4.0]];
        let d = decompose(w.view(), 1e-12).unwrap();
        assert_abs_diff_eq!(d.magnitudes[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.directions[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(d.directions[[1, 0]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_column_has_zero_direction() {
        let w = array![[0.0f32, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let d = decompose(w.view(), DEFAULT_EPSILON).unwrap();
        assert_eq!(d.magnitudes[0], 0.0);
        assert!(d.directions.column(0).iter().all(|&x| x == 0.0));
        assert_abs_diff_eq!(d.magnitudes[1], 2.0);
        for &x in d.directions.column(1) {
            assert_abs_diff_eq!(x, 0.5, epsilon = 1e-7);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let w = array![[f32::NAN]];
        assert_eq!(decompose(w.view(), 1e-8).unwrap_err().class(), "numeric.non_finite");
        assert!(decompose(array![[1.0f32]].view(), 0.0).is_err());
    }

    #[test]
    fn magnitude_examples() {
        let dk = decompose(array![[5.0f64]].view(), 1e-8).unwrap();
        let dn = decompose(array![[3.0f64]].view(), 1e-8).unwrap();
        assert_abs_diff_eq!(magnitude_deviation(&dk, &dn).unwrap()[0], 2.0, epsilon = 1e-12);
        assert_eq!(magnitude_deviation(&dk, &dk).unwrap()[0], 0.0);

        let dk = decompose(array![[0.1f64, 7.0]].view(), 1e-8).unwrap();
        let dn = decompose(array![[0.4f64, 7.0]].view(), 1e-8).unwrap();
        let dev = magnitude_deviation(&dk, &dn).unwrap();
        assert_abs_diff_eq!(dev[0], 0.3, epsilon = 1e-12);
        assert_eq!(dev[1], 0.0);

        let wide = decompose(array![[1.0f64, 2.0]].view(), 1e-8).unwrap();
        assert_eq!(magnitude_deviation(&dk, &wide).unwrap().len(), 2);
        let narrow = decompose(array![[1.0f64]].view(), 1e-8).unwrap();
        assert!(magnitude_deviation(&dk, &narrow).is_err());
    }

    #[test]
    fn direction_examples() {
        let base = decompose(array![[1.0f64, 1.0, 1.0], [0.0, 2.0, 0.0]].view(), 1e-8).unwrap();
        let other = decompose(array![[2.0f64, -1.0, 0.0], [0.0, -2.0, 3.0]].view(), 1e-8).unwrap();
        let dev = direction_deviation(&other, &base).unwrap();
        assert_abs_diff_eq!(dev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dev[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dev[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn direction_guard_on_zero_column() {
        let base = decompose(array![[0.0f64], [0.0]].view(), 1e-8).unwrap();
        let other = decompose(array![[1.0f64], [0.0]].view(), 1e-8).unwrap();
        assert_eq!(direction_deviation(&other, &base).unwrap()[0], 1.0);
    }

    #[test]
    fn cross_alignment_examples() {
        let a = array![[1.0f64, 1.0, 0.0], [2.0, -3.0, 0.0]];
        let b = array![[1.0f64, -1.0, 5.0], [2.0, 3.0, 1.0]];
        let c = cross_alignment(a.view(), b.view(), 1e-8).unwrap();
        assert_abs_diff_eq!(c[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], -1.0, epsilon = 1e-12);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn residual_split_examples() {
        let same = decompose(array![[3.0f64], [4.0]].view(), 1e-8).unwrap();
        let (l, r) = residual_split(&same, &same, 0).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);

        let k = decompose(array![[0.0f64], [2.0]].view(), 1e-8).unwrap();
        let n = decompose(array![[1.0f64], [0.0]].view(), 1e-8).unwrap();
        let (l, r) = residual_split(&k, &n, 0).unwrap();
        assert_abs_diff_eq!(l, 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r, 5.0, epsilon = 1e-10);
        assert!(residual_split(&k, &n, 1).is_err());
    }

    #[test]
    fn fused_stats_match_decomposition_route() {
        let b = array![[0.5f32, -1.0, 0.0], [0.25, 2.0, 0.0], [1.0, 0.0, 0.0]];
        let l = array![[0.6f32, -1.0, 1.0], [0.2, 2.5, 0.0], [0.9, 0.1, 0.0]];
        let m = array![[-0.5f32, -1.1, 0.0], [0.3, 1.9, 0.0], [1.2, 0.0, 0.0]];
        let cs = ColumnStats::gather(b.view(), l.view(), m.view()).unwrap();
        let (mag_ml, _) = cs.magnitude_deviations();
        let (dir_ml, dir_mm) = cs.direction_deviations(DEFAULT_EPSILON);
        let db = decompose(b.view(), DEFAULT_EPSILON).unwrap();
        let dl = decompose(l.view(), DEFAULT_EPSILON).unwrap();
        let dm = decompose(m.view(), DEFAULT_EPSILON).unwrap();
        let ref_mag = magnitude_deviation(&dl, &db).unwrap();
        let ref_dir_ml = direction_deviation(&dl, &db).unwrap();
        let ref_dir_mm = direction_deviation(&dm, &db).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(mag_ml[j], f64::from(ref_mag[j]), epsilon = 1e-6);
            assert_abs_diff_eq!(dir_ml[j], f64::from(ref_dir_ml[j]), epsilon = 1e-6);
            assert_abs_diff_eq!(dir_mm[j], f64::from(ref_dir_mm[j]), epsilon = 1e-6);
        }
        // Zero base column: guarded cosine 0, deviation 1.
        assert_eq!(dir_ml[2], 1.0);
    }
}

//! Straight-line f64 reference for the column-wise merge.
#![allow(dead_code)]

use dimerge_core::store::{Checkpoint, DType, Role, TensorRecord};
use rand::Rng;

pub struct OracleMerge {
    pub merged: Vec<f64>,
    pub omega_ml: Vec<f64>,
    pub omega_mm: Vec<f64>,
}

fn column(w: &[f64], rows: usize, cols: usize, j: usize) -> Vec<f64> {
    (0..rows).map(|i| w[i * cols + j]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Average rank by counting: rank = #smaller + (#equal + 1) / 2.
pub fn counting_ranks(v: &[f64]) -> Vec<f64> {
    let d = v.len() as f64;
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            (less + (equal + 1.0) / 2.0) / d
        })
        .collect()
}

fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let (ea, eb) = (a.exp(), b.exp());
    (ea / (ea + eb), eb / (ea + eb))
}

fn rank_scores(dev_ml: &[f64], dev_mm: &[f64]) -> Vec<f64> {
    let (r_ml, r_mm) = (counting_ranks(dev_ml), counting_ranks(dev_mm));
    r_ml.iter().zip(&r_mm).map(|(&a, &b)| softmax2(a, b).0).collect()
}

/// Column-wise merge with rank scores and branch averaging.
pub fn merge_matrix_oracle(base: &[f32], ml: &[f32], mm: &[f32], rows: usize, cols: usize, eps: f64) -> OracleMerge {
    let wide = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    let (b, l, m) = (wide(base), wide(ml), wide(mm));
    let mut dmag = [vec![0.0; cols], vec![0.0; cols]];
    let mut ddir = [vec![0.0; cols], vec![0.0; cols]];
    for j in 0..cols {
        let cb = column(&b, rows, cols, j);
        let nb = norm(&cb);
        let db: Vec<f64> = cb.iter().map(|x| x / (nb + eps)).collect();
        for (k, src) in [&l, &m].into_iter().enumerate() {
            let ck = column(src, rows, cols, j);
            let nk = norm(&ck);
            let dk: Vec<f64> = ck.iter().map(|x| x / (nk + eps)).collect();
            dmag[k][j] = (nk - nb).abs();
            // 1 − cos(u, v) = ‖û − v̂‖² / 2 for unit û, v̂
            ddir[k][j] = if nk < eps || nb < eps {
                1.0
            } else {
                let (uk, ub) = (norm(&dk), norm(&db));
                dk.iter().zip(&db).map(|(x, y)| (x / uk - y / ub).powi(2)).sum::<f64>() / 2.0
            };
        }
    }
    let s_mag = rank_scores(&dmag[0], &dmag[1]);
    let s_dir = rank_scores(&ddir[0], &ddir[1]);
    let omega_ml: Vec<f64> = s_mag.iter().zip(&s_dir).map(|(a, b)| 0.5 * (a + b)).collect();
    let omega_mm: Vec<f64> = omega_ml.iter().map(|w| 1.0 - w).collect();
    let merged = (0..rows * cols)
        .map(|i| {
            let j = i % cols;
            b[i] + omega_ml[j] * (l[i] - b[i]) + omega_mm[j] * (m[i] - b[i])
        })
        .collect();
    OracleMerge { merged, omega_ml, omega_mm }
}

/// Element-wise merge of vectors with rank scores.
pub fn merge_vector_oracle(base: &[f32], ml: &[f32], mm: &[f32]) -> OracleMerge {
    let dev = |src: &[f32]| -> Vec<f64> {
        src.iter().zip(base).map(|(&s, &b)| (f64::from(s) - f64::from(b)).abs()).collect()
    };
    let omega_ml = rank_scores(&dev(ml), &dev(mm));
    let omega_mm: Vec<f64> = omega_ml.iter().map(|w| 1.0 - w).collect();
    let merged = base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let b = f64::from(b);
            b + omega_ml[i] * (f64::from(ml[i]) - b) + omega_mm[i] * (f64::from(mm[i]) - b)
        })
        .collect();
    OracleMerge { merged, omega_ml, omega_mm }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random values with occasional zeroed, duplicated or unchanged columns.
pub fn random_triple<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> [Vec<f32>; 3] {
    let n = rows * cols;
    let base: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = [base.clone(), base.clone(), base];
    let scale_ml: f32 = rng.gen_range(0.001..0.5);
    let scale_mm: f32 = rng.gen_range(0.001..0.5);
    let [_, ml, mm] = &mut out;
    for (l, m) in ml.iter_mut().zip(mm.iter_mut()) {
        *l += scale_ml * rng.gen_range(-1.0f32..1.0);
        *m += scale_mm * rng.gen_range(-1.0f32..1.0);
    }
    if cols > 1 && rng.gen_bool(0.3) {
        let j = rng.gen_range(0..cols);
        let which = rng.gen_range(0..3);
        for i in 0..rows {
            out[which][i * cols + j] = 0.0;
        }
    }
    if cols > 2 && rng.gen_bool(0.3) {
        for t in out.iter_mut() {
            for i in 0..rows {
                t[i * cols + 1] = t[i * cols];
            }
        }
    }
    if rng.gen_bool(0.1) {
        out[1] = out[0].clone();
    }
    out
}

pub fn record(name: &str, shape: &[usize], v: &[f32], dtype: DType) -> TensorRecord {
    TensorRecord::from_f32(name, shape.to_vec(), v, dtype).unwrap()
}

pub fn checkpoint(role: Role, records: Vec<TensorRecord>) -> Checkpoint {
    Checkpoint::from_records(role, records).unwrap()
}

/// Names whose bytes differ between two checkpoints, plus names in only one.
pub fn differing(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out: Vec<String> = a
        .iter()
        .filter(|r| b.get(r.name()) != Some(*r))
        .map(|r| r.name().to_string())
        .collect();
    out.extend(b.names().filter(|n| !a.contains(n)).map(String::from));
    out
}

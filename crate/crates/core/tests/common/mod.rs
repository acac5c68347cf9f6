#![allow(dead_code)]

use fragdiff_core::features::{FeatureRecord, FeatureSet};
use fragdiff_core::sparse::CsrMatrix;
use fragdiff_core::{Domain, FragmentId};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dense(m: &CsrMatrix) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for (j, v) in m.row(i) {
            out[(i, j)] = v;
        }
    }
    out
}

/// `(1 - alpha) (I - alpha S)^{-1} f0` by dense LU.
pub fn dense_fixed_point(s: &CsrMatrix, f0: &[f64], alpha: f64) -> Vec<f64> {
    let n = s.rows();
    let a = DMatrix::identity(n, n) - dense(s) * alpha;
    let x = a.lu().solve(&DVector::from_column_slice(f0)).expect("nonsingular");
    x.iter().map(|v| (1.0 - alpha) * v).collect()
}

/// Random feature set: `n` records, the first half source, in `d` dims.
pub fn random_set(seed: u64, n: usize, d: usize) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| FeatureRecord {
            id: FragmentId::new(i as u32, 0, 0),
            domain: if i < n / 2 { Domain::Source } else { Domain::Target },
            vector: (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    FeatureSet::new(d, records).unwrap()
}

/// Exact cosine, computed independently of the crate.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum();
    dot / (na * nb).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

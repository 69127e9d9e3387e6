//! Dense reference implementations shared by integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Matérn correlation for half-integer smoothness, written out explicitly.
pub fn matern_closed(mu: f64, x: f64) -> f64 {
    let x = x.abs();
    match (2.0 * mu).round() as i64 {
        1 => (-x).exp(),
        3 => (1.0 + x) * (-x).exp(),
        5 => (1.0 + x + x * x / 3.0) * (-x).exp(),
        _ => panic!("no closed form for mu = {mu}"),
    }
}

pub fn matern_matrix(t: &[f64], tau2: f64, alpha: f64, mu: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), t.len(), |r, c| tau2 * matern_closed(mu, alpha * (t[r] - t[c])))
}

pub fn bridge_matrix(a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), a.len(), |r, c| a[r].min(a[c]) - a[r] * a[c])
}

/// Piecewise-linear hat function of anchor `k` (1-based among interior
/// anchors) on the grid `j / (n_w + 1)`.
pub fn hat(n_w: usize, k: usize, t: f64) -> f64 {
    let h = 1.0 / (n_w + 1) as f64;
    let center = k as f64 * h;
    (1.0 - (t - center).abs() / h).max(0.0)
}

/// `t + Σ_k hat_k(t) (a_k − anchor_k)`.
pub fn linear_warp(a: &[f64], t: f64) -> f64 {
    let n_w = a.len();
    let h = 1.0 / (n_w + 1) as f64;
    t + a
        .iter()
        .enumerate()
        .map(|(k, v)| hat(n_w, k + 1, t) * (v - (k + 1) as f64 * h))
        .sum::<f64>()
}

/// `log det` via LU and quadratic form via the explicit inverse.
pub fn dense_logdet_quad(v: &DMatrix<f64>, r: &DVector<f64>) -> (f64, f64) {
    let det = v.clone().lu().determinant();
    assert!(det > 0.0, "covariance not positive definite");
    let inv = v.clone().try_inverse().expect("invertible");
    (det.ln(), (r.transpose() * inv * r)[(0, 0)])
}

/// Dense GLS `(Σ Φ'A⁻¹Φ)⁻¹ Σ Φ'A⁻¹y` with explicit inverses.
pub fn dense_gls(blocks: &[(DMatrix<f64>, DMatrix<f64>, DVector<f64>)]) -> DVector<f64> {
    let k = blocks[0].0.ncols();
    let mut m = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (phi, a, y) in blocks {
        let ai = a.clone().try_inverse().unwrap();
        m += phi.transpose() * &ai * phi;
        b += phi.transpose() * &ai * y;
    }
    m.try_inverse().unwrap() * b
}

pub fn uniform_vec(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Sorted random times in [0, 1] including both endpoints.
pub fn random_grid(rng: &mut ChaCha20Rng, m: usize) -> Vec<f64> {
    let mut t = vec![0.0, 1.0];
    while t.len() < m {
        let x: f64 = rng.random_range(0.02..0.98);
        if t.iter().all(|s| (s - x).abs() > 0.02) {
            t.push(x);
        }
    }
    t.sort_by(f64::total_cmp);
    t
}

/// Relative error `|a − b| / max(1, |b|)`.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn integrated_sq(grid: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (1..grid.len())
        .map(|k| 0.5 * (grid[k] - grid[k - 1]) * ((a[k] - b[k]).powi(2) + (a[k - 1] - b[k - 1]).powi(2)))
        .sum()
}

//! Warping functions on [0, 1].
//!
//! A warp is determined by its values at `n_w` equidistant interior anchors
//! and is pinned at 0 and 1. The fixed participant warp `ν` and the random
//! disparity `w` add on the anchors, so the combined warp interpolates
//! `(0, 0), (t_k, ν_k + w_k), (1, 1)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum gap between consecutive anchor values after projection.
pub const MIN_GAP: f64 = 1e-4;

const DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Monotone piecewise cubic Hermite (Fritsch–Carlson slopes).
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub n_w: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl WarpConfig {
    pub fn new(n_w: usize, interpolation: Interpolation) -> Self {
        Self { n_w, interpolation }
    }

    pub fn linear(n_w: usize) -> Self {
        Self::new(n_w, Interpolation::Linear)
    }

    /// Interior anchor times `k / (n_w + 1)`, `k = 1..=n_w`.
    pub fn anchors(&self) -> Vec<f64> {
        let d = (self.n_w + 1) as f64;
        (1..=self.n_w).map(|k| k as f64 / d).collect()
    }

    /// Anchors including the pinned endpoints.
    fn nodes(&self) -> Vec<f64> {
        (0..=self.n_w + 1).map(|k| self.node(k)).collect()
    }

    fn node(&self, k: usize) -> f64 {
        k as f64 / (self.n_w + 1) as f64
    }

    /// Same segment as [`segment`] on the node grid, without allocating.
    fn linear_segment(&self, t: f64) -> usize {
        let last = self.n_w;
        let mut k = ((t * (self.n_w + 1) as f64).floor().max(0.0) as usize).min(last);
        while k > 0 && self.node(k) > t {
            k -= 1;
        }
        while k < last && self.node(k + 1) <= t {
            k += 1;
        }
        k
    }

    /// Warp value at `t` for interior anchor values `values`.
    pub fn eval_values(&self, values: &[f64], t: f64) -> f64 {
        self.eval_with_gradient(values, t, None)
    }

    /// Warp value at `t`; if `grad` is given it receives the derivative
    /// with respect to each anchor value.
    pub fn eval_with_gradient(&self, values: &[f64], t: f64, grad: Option<&mut [f64]>) -> f64 {
        debug_assert_eq!(values.len(), self.n_w);
        match self.interpolation {
            Interpolation::Linear => {
                let k = self.linear_segment(t);
                let (x0, x1) = (self.node(k), self.node(k + 1));
                let tau = (t - x0) / (x1 - x0);
                let dev = |i: usize| {
                    if i == 0 || i == self.n_w + 1 {
                        0.0
                    } else {
                        values[i - 1] - self.node(i)
                    }
                };
                if let Some(g) = grad {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    if k >= 1 {
                        g[k - 1] = 1.0 - tau;
                    }
                    if k < self.n_w {
                        g[k] = tau;
                    }
                }
                t + (1.0 - tau) * dev(k) + tau * dev(k + 1)
            }
            Interpolation::Cubic => {
                let nodes = self.nodes();
                let k = segment(&nodes, t);
                let h = nodes[k + 1] - nodes[k];
                let tau = (t - nodes[k]) / h;
                let identity = values.iter().zip(&nodes[1..]).all(|(v, n)| v == n);
                let y = full_values(values);
                let (m, dm) = pchip_slopes(&nodes, &y);
                let tau2 = tau * tau;
                let tau3 = tau2 * tau;
                let h00 = 2.0 * tau3 - 3.0 * tau2 + 1.0;
                let h10 = tau3 - 2.0 * tau2 + tau;
                let h01 = -2.0 * tau3 + 3.0 * tau2;
                let h11 = tau3 - tau2;
                if let Some(g) = grad {
                    for (j, gj) in g.iter_mut().enumerate() {
                        let node = j + 1;
                        let mut v = h10 * h * dm[(k, node)] + h11 * h * dm[(k + 1, node)];
                        if node == k {
                            v += h00;
                        }
                        if node == k + 1 {
                            v += h01;
                        }
                        *gj = v;
                    }
                }
                if identity {
                    return t;
                }
                h00 * y[k] + h10 * h * m[k] + h01 * y[k + 1] + h11 * h * m[k + 1]
            }
        }
    }
}

fn full_values(values: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(values.len() + 2);
    y.push(0.0);
    y.extend_from_slice(values);
    y.push(1.0);
    y
}

/// Index `k` of the segment `[nodes[k], nodes[k+1])` holding `t`; the last
/// segment is closed.
fn segment(nodes: &[f64], t: f64) -> usize {
    let last = nodes.len() - 2;
    let k = nodes.partition_point(|&x| x <= t);
    k.saturating_sub(1).min(last)
}

/// Fritsch–Carlson style monotone slopes (weighted harmonic mean in the
/// interior, shape-preserving three-point formula at the ends) and their
/// derivatives with respect to the node values.
fn pchip_slopes(x: &[f64], y: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len();
    let segs = n - 1;
    let h: Vec<f64> = (0..segs).map(|k| x[k + 1] - x[k]).collect();
    let s: Vec<f64> = (0..segs).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    // ds[k] wrt y: -1/h at k, +1/h at k+1
    let mut m = vec![0.0; n];
    let mut dm = DMatrix::zeros(n, n);
    let add_ds = |dm: &mut DMatrix<f64>, row: usize, k: usize, coef: f64| {
        dm[(row, k)] -= coef / h[k];
        dm[(row, k + 1)] += coef / h[k];
    };
    if segs == 1 {
        m[0] = s[0];
        m[1] = s[0];
        add_ds(&mut dm, 0, 0, 1.0);
        add_ds(&mut dm, 1, 0, 1.0);
        return (m, dm);
    }
    for k in 1..segs {
        let (a, b) = (s[k - 1], s[k]);
        if a * b <= 0.0 {
            continue;
        }
        let w1 = 2.0 * h[k] + h[k - 1];
        let w2 = h[k] + 2.0 * h[k - 1];
        let d = w1 / a + w2 / b;
        m[k] = (w1 + w2) / d;
        let da = (w1 + w2) * w1 / (a * a) / (d * d);
        let db = (w1 + w2) * w2 / (b * b) / (d * d);
        add_ds(&mut dm, k, k - 1, da);
        add_ds(&mut dm, k, k, db);
    }
    let mut end = |node: usize, s0: f64, s1: f64, k0: usize, k1: usize, h0: f64, h1: f64| {
        let v = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if v.signum() != s0.signum() || v == 0.0 {
            return;
        }
        if s0.signum() != s1.signum() && v.abs() > 3.0 * s0.abs() {
            m[node] = 3.0 * s0;
            add_ds(&mut dm, node, k0, 3.0);
            return;
        }
        m[node] = v;
        add_ds(&mut dm, node, k0, (2.0 * h0 + h1) / (h0 + h1));
        add_ds(&mut dm, node, k1, -h0 / (h0 + h1));
    };
    end(0, s[0], s[1], 0, 1, h[0], h[1]);
    end(n - 1, s[segs - 1], s[segs - 2], segs - 1, segs - 2, h[segs - 1], h[segs - 2]);
    (m, dm)
}

/// Fixed (participant-level) warp: anchor values `ν(t_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedWarp {
    pub values: Vec<f64>,
}

impl FixedWarp {
    pub fn identity(cfg: &WarpConfig) -> Self {
        Self {
            values: cfg.anchors(),
        }
    }
}

/// Random (repetition-level) disparities from the identity at the anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomWarpParams {
    pub w: Vec<f64>,
}

impl RandomWarpParams {
    pub fn zero(n_w: usize) -> Self {
        Self { w: vec![0.0; n_w] }
    }
}

fn check_dims(cfg: &WarpConfig, fixed: &FixedWarp, rand: Option<&RandomWarpParams>) -> Result<()> {
    if fixed.values.len() != cfg.n_w {
        return Err(Error::Dimension {
            expected: cfg.n_w,
            got: fixed.values.len(),
        });
    }
    if let Some(r) = rand {
        if r.w.len() != cfg.n_w {
            return Err(Error::Dimension {
                expected: cfg.n_w,
                got: r.w.len(),
            });
        }
    }
    Ok(())
}

fn check_times(t: &[f64]) -> Result<()> {
    for &x in t {
        if !(x >= -DOMAIN_TOL && x <= 1.0 + DOMAIN_TOL) {
            return Err(Error::Domain {
                value: x,
                domain: "[0, 1]",
            });
        }
    }
    Ok(())
}

/// Combined anchor values `ν + w`.
pub fn combined_values(fixed: &FixedWarp, rand: Option<&RandomWarpParams>) -> Vec<f64> {
    match rand {
        Some(r) => fixed.values.iter().zip(&r.w).map(|(a, b)| a + b).collect(),
        None => fixed.values.clone(),
    }
}

/// Evaluates the combined warp at `t`. Values are not clamped.
pub fn eval_warp(
    cfg: &WarpConfig,
    fixed: &FixedWarp,
    rand: Option<&RandomWarpParams>,
    t: &[f64],
) -> Result<Vec<f64>> {
    check_dims(cfg, fixed, rand)?;
    check_times(t)?;
    let a = combined_values(fixed, rand);
    Ok(t.iter().map(|&x| cfg.eval_values(&a, x.clamp(0.0, 1.0))).collect())
}

/// Derivatives of the combined warp at `t` with respect to the disparities
/// (equivalently the fixed anchor values), `len(t) × n_w`.
pub fn warp_jacobian(
    cfg: &WarpConfig,
    fixed: &FixedWarp,
    rand: Option<&RandomWarpParams>,
    t: &[f64],
) -> Result<DMatrix<f64>> {
    check_dims(cfg, fixed, rand)?;
    check_times(t)?;
    let a = combined_values(fixed, rand);
    let mut jac = DMatrix::zeros(t.len(), cfg.n_w);
    let mut g = vec![0.0; cfg.n_w];
    for (r, &x) in t.iter().enumerate() {
        cfg.eval_with_gradient(&a, x.clamp(0.0, 1.0), Some(&mut g));
        for k in 0..cfg.n_w {
            jac[(r, k)] = g[k];
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Homeomorphism {
    pub fixed: FixedWarp,
    pub rand: RandomWarpParams,
    pub adjusted: bool,
}

/// Makes `(0, ν, 1)` and `(0, ν + w, 1)` strictly increasing.
///
/// Feasible inputs are returned unchanged. Otherwise the offending anchor
/// values are replaced by their least-squares projection onto increasing
/// sequences with gaps of at least [`MIN_GAP`].
pub fn enforce_homeomorphism(
    cfg: &WarpConfig,
    fixed: &FixedWarp,
    rand: Option<&RandomWarpParams>,
) -> Homeomorphism {
    let zero = RandomWarpParams::zero(cfg.n_w);
    let rand = rand.unwrap_or(&zero);
    let (nu, nu_adj) = project_increasing(&fixed.values);
    let combined: Vec<f64> = nu.iter().zip(&rand.w).map(|(a, b)| a + b).collect();
    let (comb, comb_adj) = project_increasing(&combined);
    let w = if nu_adj || comb_adj {
        comb.iter().zip(&nu).map(|(c, n)| c - n).collect()
    } else {
        rand.w.clone()
    };
    Homeomorphism {
        fixed: FixedWarp { values: nu },
        rand: RandomWarpParams { w },
        adjusted: nu_adj || comb_adj,
    }
}

pub fn is_strictly_increasing(values: &[f64]) -> bool {
    let mut prev = 0.0;
    for &v in values {
        if !(v > prev) {
            return false;
        }
        prev = v;
    }
    prev < 1.0
}

/// Returns the projected sequence and whether a change was needed.
pub fn project_increasing(values: &[f64]) -> (Vec<f64>, bool) {
    if is_strictly_increasing(values) {
        return (values.to_vec(), false);
    }
    let n = values.len();
    let shifted: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let v = if v.is_finite() { v } else { 0.5 };
            v - (k + 1) as f64 * MIN_GAP
        })
        .collect();
    let upper = 1.0 - (n + 1) as f64 * MIN_GAP;
    let iso = isotonic(&shifted);
    let out = iso
        .iter()
        .enumerate()
        .map(|(k, &b)| b.clamp(0.0, upper) + (k + 1) as f64 * MIN_GAP)
        .collect();
    (out, true)
}

/// Unweighted pool-adjacent-violators fit of a nondecreasing sequence.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(y.len());
    let mut sizes: Vec<usize> = Vec::with_capacity(y.len());
    for &v in y {
        means.push(v);
        sizes.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, s2) = (means.pop().unwrap(), sizes.pop().unwrap());
            let (m1, s1) = (means.pop().unwrap(), sizes.pop().unwrap());
            let s = s1 + s2;
            means.push((m1 * s1 as f64 + m2 * s2 as f64) / s as f64);
            sizes.push(s);
        }
    }
    means
        .iter()
        .zip(&sizes)
        .flat_map(|(&m, &s)| std::iter::repeat_n(m, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_increasing(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn identity_is_exact() {
        for interp in [Interpolation::Linear, Interpolation::Cubic] {
            let cfg = WarpConfig::new(4, interp);
            let fixed = FixedWarp::identity(&cfg);
            let zero = RandomWarpParams::zero(4);
            let t: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            assert_eq!(eval_warp(&cfg, &fixed, Some(&zero), &t).unwrap(), t);
        }
    }

    #[test]
    fn single_anchor_arithmetic() {
        let cfg = WarpConfig::linear(1);
        let fixed = FixedWarp { values: vec![0.6] };
        let u = eval_warp(&cfg, &fixed, None, &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(u[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn endpoints_are_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for interp in [Interpolation::Linear, Interpolation::Cubic] {
            for n_w in 0..6 {
                let cfg = WarpConfig::new(n_w, interp);
                let fixed = FixedWarp {
                    values: random_increasing(&mut rng, n_w),
                };
                let w = RandomWarpParams {
                    w: (0..n_w).map(|_| rng.random_range(-0.3..0.3)).collect(),
                };
                let u = eval_warp(&cfg, &fixed, Some(&w), &[0.0, 1.0]).unwrap();
                assert_eq!(u, vec![0.0, 1.0]);
                let j = warp_jacobian(&cfg, &fixed, Some(&w), &[0.0, 1.0]).unwrap();
                assert!(j.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn interpolates_anchors_and_stays_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for draw in 0..100 {
            let interp = if draw % 2 == 0 {
                Interpolation::Linear
            } else {
                Interpolation::Cubic
            };
            let n_w = 1 + draw % 7;
            let cfg = WarpConfig::new(n_w, interp);
            let fixed = FixedWarp {
                values: random_increasing(&mut rng, n_w),
            };
            let at = eval_warp(&cfg, &fixed, None, &cfg.anchors()).unwrap();
            for (a, b) in at.iter().zip(&fixed.values) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            let t: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
            let u = eval_warp(&cfg, &fixed, None, &t).unwrap();
            assert!(u.windows(2).all(|p| p[1] >= p[0] - 1e-14));
        }
    }

    #[test]
    fn jacobian_rows_at_anchors_are_unit_vectors() {
        let cfg = WarpConfig::linear(3);
        let fixed = FixedWarp::identity(&cfg);
        let j = warp_jacobian(&cfg, &fixed, None, &cfg.anchors()).unwrap();
        assert_eq!(j, DMatrix::identity(3, 3));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for interp in [Interpolation::Linear, Interpolation::Cubic] {
            for _ in 0..200 {
                let n_w = rng.random_range(1..6);
                let cfg = WarpConfig::new(n_w, interp);
                let fixed = FixedWarp {
                    values: random_increasing(&mut rng, n_w),
                };
                let w: Vec<f64> = (0..n_w).map(|_| rng.random_range(-0.01..0.01)).collect();
                let t = rng.random_range(0.0..1.0);
                let j = warp_jacobian(&cfg, &fixed, Some(&RandomWarpParams { w: w.clone() }), &[t])
                    .unwrap();
                let h = 1e-7;
                for k in 0..n_w {
                    let mut wp = w.clone();
                    let mut wm = w.clone();
                    wp[k] += h;
                    wm[k] -= h;
                    let up = eval_warp(&cfg, &fixed, Some(&RandomWarpParams { w: wp }), &[t]).unwrap();
                    let um = eval_warp(&cfg, &fixed, Some(&RandomWarpParams { w: wm }), &[t]).unwrap();
                    let fd = (up[0] - um[0]) / (2.0 * h);
                    assert!((fd - j[(0, k)]).abs() < 1e-5, "{interp:?} fd {fd} vs {}", j[(0, k)]);
                }
            }
        }
    }

    #[test]
    fn linear_jacobian_does_not_depend_on_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = WarpConfig::linear(5);
        let fixed = FixedWarp::identity(&cfg);
        let t: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let w1 = RandomWarpParams {
            w: (0..5).map(|_| rng.random_range(-0.2..0.2)).collect(),
        };
        let w2 = RandomWarpParams {
            w: (0..5).map(|_| rng.random_range(-0.2..0.2)).collect(),
        };
        let j1 = warp_jacobian(&cfg, &fixed, Some(&w1), &t).unwrap();
        let j2 = warp_jacobian(&cfg, &fixed, Some(&w2), &t).unwrap();
        assert_eq!(j1, j2);
        for r in 0..t.len() {
            let s: f64 = j1.row(r).iter().sum();
            assert!(s <= 1.0 + 1e-15 && j1.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn feasible_input_is_untouched() {
        let cfg = WarpConfig::linear(2);
        let fixed = FixedWarp {
            values: vec![0.3, 0.6],
        };
        let w = RandomWarpParams { w: vec![0.05, -0.1] };
        let h = enforce_homeomorphism(&cfg, &fixed, Some(&w));
        assert!(!h.adjusted);
        assert_eq!(h.fixed, fixed);
        assert_eq!(h.rand, w);
    }

    #[test]
    fn crossing_pair_is_projected() {
        let cfg = WarpConfig::linear(2);
        let fixed = FixedWarp {
            values: vec![0.7, 0.3],
        };
        let h = enforce_homeomorphism(&cfg, &fixed, None);
        assert!(h.adjusted);
        let v = &h.fixed.values;
        assert!(v[1] - v[0] >= MIN_GAP - 1e-15);
        // Pool-adjacent-violators of the gap-shifted sequence pools both values.
        let pooled = 0.5 * ((0.7 - MIN_GAP) + (0.3 - 2.0 * MIN_GAP));
        assert_abs_diff_eq!(v[0], pooled + MIN_GAP, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], pooled + 2.0 * MIN_GAP, epsilon = 1e-15);
    }

    #[test]
    fn ties_become_uniform_gaps() {
        let cfg = WarpConfig::linear(4);
        let fixed = FixedWarp {
            values: vec![0.5; 4],
        };
        let h = enforce_homeomorphism(&cfg, &fixed, None);
        assert!(h.adjusted);
        for p in h.fixed.values.windows(2) {
            assert_abs_diff_eq!(p[1] - p[0], MIN_GAP, epsilon = 1e-12);
        }
        assert!(is_strictly_increasing(&h.fixed.values));
    }

    #[test]
    fn combined_warp_is_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n_w = rng.random_range(1..6);
            let cfg = WarpConfig::linear(n_w);
            let fixed = FixedWarp {
                values: (0..n_w).map(|_| rng.random_range(-0.2..1.2)).collect(),
            };
            let w = RandomWarpParams {
                w: (0..n_w).map(|_| rng.random_range(-0.5..0.5)).collect(),
            };
            let h = enforce_homeomorphism(&cfg, &fixed, Some(&w));
            assert!(is_strictly_increasing(&h.fixed.values));
            assert!(is_strictly_increasing(&combined_values(&h.fixed, Some(&h.rand))));
        }
    }

    #[test]
    fn isotonic_matches_brute_force_on_small_inputs() {
        // Least squares over nondecreasing sequences, searched on a grid.
        let y = [0.4, 0.1, 0.3];
        let fit = isotonic(&y);
        let grid: Vec<f64> = (0..=80).map(|i| i as f64 * 0.005).collect();
        let mut best = f64::INFINITY;
        for &a in &grid {
            for &b in grid.iter().filter(|&&b| b >= a) {
                for &c in grid.iter().filter(|&&c| c >= b) {
                    let s = (a - y[0]).powi(2) + (b - y[1]).powi(2) + (c - y[2]).powi(2);
                    best = best.min(s);
                }
            }
        }
        let got: f64 = fit.iter().zip(&y).map(|(f, v)| (f - v).powi(2)).sum();
        assert!(got <= best + 1e-12);
        assert_abs_diff_eq!(fit[0], fit[1], epsilon = 1e-15);
    }

    #[test]
    fn out_of_domain_time_is_rejected() {
        let cfg = WarpConfig::linear(1);
        let fixed = FixedWarp::identity(&cfg);
        assert!(matches!(
            eval_warp(&cfg, &fixed, None, &[1.2]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn zero_anchors_give_identity() {
        let cfg = WarpConfig::linear(0);
        let fixed = FixedWarp::identity(&cfg);
        let t = [0.0, 0.3, 1.0];
        assert_eq!(eval_warp(&cfg, &fixed, None, &t).unwrap(), t.to_vec());
        assert_eq!(warp_jacobian(&cfg, &fixed, None, &t).unwrap().ncols(), 0);
    }
}

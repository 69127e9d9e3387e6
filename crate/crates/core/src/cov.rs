//! Covariance kernels and dense SPD matrix algebra.
//!
//! Amplitude effects use a Matérn kernel, warp disparities a Brownian bridge
//! (or Brownian motion) kernel. All factorizations go through [`SpdFactor`],
//! which applies a bounded diagonal jitter before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub trait Kernel {
    fn eval(&self, s: f64, t: f64) -> f64;
}

/// Matérn covariance `tau2 * 2^(1-mu)/Gamma(mu) * (alpha d)^mu K_mu(alpha d)`.
///
/// `alpha` is the inverse range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternKernel {
    pub scale: f64,
    pub alpha: f64,
    pub smoothness: f64,
}

impl MaternKernel {
    pub fn new(scale: f64, alpha: f64, smoothness: f64) -> Result<Self> {
        for (name, v) in [("scale", scale), ("alpha", alpha), ("smoothness", smoothness)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("Matérn {name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            scale,
            alpha,
            smoothness,
        })
    }

    pub fn from_range(scale: f64, range: f64, smoothness: f64) -> Result<Self> {
        if !(range > 0.0) {
            return Err(Error::Parameter(format!("Matérn range must be positive, got {range}")));
        }
        Self::new(scale, 1.0 / range, smoothness)
    }

    pub fn range(&self) -> f64 {
        1.0 / self.alpha
    }

    /// Correlation at distance `d >= 0`.
    pub fn correlation(&self, d: f64) -> f64 {
        matern_correlation(self.smoothness, self.alpha * d.abs())
    }
}

impl Kernel for MaternKernel {
    fn eval(&self, s: f64, t: f64) -> f64 {
        self.scale * self.correlation(s - t)
    }
}

/// Matérn correlation as a function of the scaled distance `x = alpha d`.
pub fn matern_correlation(mu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let half = (2.0 * mu).round();
    if (2.0 * mu - half).abs() < 1e-14 && half as i64 % 2 == 1 && half <= 5.0 {
        let poly = match half as i64 {
            1 => 1.0,
            3 => 1.0 + x,
            _ => 1.0 + x + x * x / 3.0,
        };
        return poly * (-x).exp();
    }
    if x > 700.0 {
        return 0.0;
    }
    if x < 1e-12 {
        return 1.0;
    }
    let log_c = (1.0 - mu) * std::f64::consts::LN_2 - ln_gamma(mu) + mu * x.ln();
    (log_c + bessel_k(mu, x).ln()).exp().min(1.0)
}

/// Modified Bessel function of the second kind `K_nu(x)` for `nu >= 0`,
/// `x > 0`, by Temme's series (`x < 2`) or Steed's continued fraction,
/// followed by upward recurrence in the order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k needs nu >= 0 and x > 0");
    const EPS: f64 = 1e-16;
    const MAXIT: usize = 10_000;
    let nl = (nu + 0.5).floor() as usize;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = std::f64::consts::PI * xmu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = xmu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let gampl = 1.0 / gamma(1.0 + xmu);
        let gammi = 1.0 / gamma(1.0 - xmu);
        let gam2 = 0.5 * (gammi + gampl);
        let gam1 = if xmu.abs() < 1e-4 {
            -EULER_GAMMA + 0.042_002_635_034_095_2 * xmu2
        } else {
            (gammi - gampl) / (2.0 * xmu)
        };
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAXIT {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= dd / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAXIT {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        rkmu = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = next;
    }
    rkmu
}

/// Zero-drift Brownian bridge on [0, 1]: `C(s, t) = scale * min(s,t) * (1 - max(s,t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeKernel {
    pub scale: f64,
}

/// Brownian motion started at zero: `C(s, t) = scale * min(s, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionKernel {
    pub scale: f64,
}

impl Kernel for BridgeKernel {
    fn eval(&self, s: f64, t: f64) -> f64 {
        self.scale * s.min(t) * (1.0 - s.max(t))
    }
}

impl Kernel for MotionKernel {
    fn eval(&self, s: f64, t: f64) -> f64 {
        self.scale * s.min(t)
    }
}

/// Prior family for the warp disparities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WarpKernel {
    Bridge(BridgeKernel),
    Motion(MotionKernel),
}

impl WarpKernel {
    pub fn bridge(scale: f64) -> Result<Self> {
        check_scale(scale)?;
        Ok(WarpKernel::Bridge(BridgeKernel { scale }))
    }

    pub fn motion(scale: f64) -> Result<Self> {
        check_scale(scale)?;
        Ok(WarpKernel::Motion(MotionKernel { scale }))
    }

    pub fn scale(&self) -> f64 {
        match self {
            WarpKernel::Bridge(k) => k.scale,
            WarpKernel::Motion(k) => k.scale,
        }
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        match self {
            WarpKernel::Bridge(_) => WarpKernel::Bridge(BridgeKernel { scale }),
            WarpKernel::Motion(_) => WarpKernel::Motion(MotionKernel { scale }),
        }
    }
}

impl Kernel for WarpKernel {
    fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            WarpKernel::Bridge(k) => k.eval(s, t),
            WarpKernel::Motion(k) => k.eval(s, t),
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Parameter(format!("kernel scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Covariance of the kernel at `times`.
pub fn build_cov<K: Kernel + ?Sized>(kernel: &K, times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(times[i], times[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// On failure a jitter of `1e-10 * max(diag)` is added, growing tenfold up
/// to `1e-6 * max(diag)` before a conditioning error is returned.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("matrix has non-finite entries".into()));
        }
        let max_diag = a.diagonal().iter().cloned().fold(0.0, f64::max);
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        if !(max_diag > 0.0) {
            return Err(Error::Conditioning("matrix has no positive diagonal entry".into()));
        }
        let mut rel = 1e-10;
        while rel <= 1e-6 * (1.0 + 1e-9) {
            let jitter = rel * max_diag;
            let mut b = a.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(b) {
                return Ok(Self { chol, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Conditioning(format!(
            "Cholesky factorization failed after jitter up to 1e-6 * {max_diag:.3e} (n = {})",
            a.nrows()
        )))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Diagonal jitter that was needed for the factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `L^{-1} z` where `A = L L'`.
    pub fn whiten(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut w = z.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    }

    /// `L^{-T} q`; composing with [`whiten`](Self::whiten) gives `A^{-1} z`.
    pub fn back_solve(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut x = q.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L^{-1} B` column by column.
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    }

    /// `z' A^{-1} z`.
    pub fn weighted_norm(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.whiten(z).norm_squared())
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// `z' A^{-1} z` for SPD `A`, through its Cholesky factor.
pub fn weighted_norm(a: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
    if a.nrows() != z.len() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: z.len(),
        });
    }
    SpdFactor::new(a.clone())?.weighted_norm(z)
}

/// `log det A` for SPD `A`.
pub fn logdet(a: &DMatrix<f64>) -> Result<f64> {
    Ok(SpdFactor::new(a.clone())?.logdet())
}

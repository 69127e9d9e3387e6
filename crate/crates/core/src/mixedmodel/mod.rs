//! Curves with a shared template, individual templates, serially correlated
//! amplitude effects and random time warps:
//!
//! `y_ij(t) = (θ + φ_i)(ν_i + v_ij)(t) + x_ij(t) + ε_ij(t)`
//!
//! with `θ = Φc`, `φ_i = Φd_i`, `x_ij ~ GP(0, σ²S)` (Matérn) and warp
//! disparities `w_ij ~ N(0, σ²C)` (Brownian bridge or motion at the warp
//! anchors). Estimation alternates warp prediction, template estimation and
//! a linearized (Laplace) likelihood for the variance parameters.

mod context;
mod fit;
mod laplace;
mod posterior;
mod templates;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cov::{MaternKernel, WarpKernel};
use crate::error::{Error, Result};
use crate::warp::{FixedWarp, RandomWarpParams, WarpConfig};

pub use context::{ModelContext, Weights};
pub use fit::{fit, FitTrace, FittedModel, InnerStep, OuterStep};
pub use laplace::{estimate_variance, laplace_nll, linearize, profile_nll, CurveLinearization, LinearizedSystem};
pub use posterior::{optimize_warps, posterior_distance, predict_warp, warp_posterior, warp_posterior_gradient, WarpEstimate};
pub use templates::{estimate_phi, estimate_theta};

/// Noise variance and the kernel parameters, all relative to `σ²` except
/// `σ²` itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma2: f64,
    pub gamma2: f64,
    pub tau2: f64,
    pub alpha: f64,
    pub mu: f64,
}

impl VarianceParams {
    pub fn amp_kernel(&self) -> Result<MaternKernel> {
        MaternKernel::new(self.tau2, self.alpha, self.mu)
    }

    /// Ridge penalty on the individual templates, `λ / (1 + τ²)`.
    pub fn eta(&self, lambda: f64) -> f64 {
        lambda / (1.0 + self.tau2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lower > 0.0 && self.upper >= self.lower && self.upper.is_finite()) {
            return Err(Error::Config(format!(
                "bounds for {name} must satisfy 0 < lower <= upper < inf, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Box constraints for the variance parameter search (natural scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBounds {
    pub gamma2: Interval,
    pub tau2: Interval,
    pub alpha: Interval,
    pub mu: Interval,
}

impl Default for VarianceBounds {
    fn default() -> Self {
        Self {
            gamma2: Interval::new(1e-6, 1e6),
            tau2: Interval::new(1e-6, 1e6),
            alpha: Interval::new(1e-2, 1e5),
            mu: Interval::new(0.1, 20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub basis: SplineBasis,
    pub warp: WarpConfig,
    /// Starting values of the amplitude covariance.
    pub amp_kernel: MaternKernel,
    /// Prior family and starting scale of the warp disparities.
    pub warp_kernel: WarpKernel,
    /// Penalty on the individual templates before normalization by `1 + τ²`.
    pub lambda: f64,
    /// Outer (variance) iterations.
    pub i_max: usize,
    /// Inner (warp/template) iterations.
    pub j_max: usize,
    pub estimate_smoothness: bool,
    pub bounds: VarianceBounds,
    /// Inner loop stops once no warp parameter moves by more than this.
    pub inner_tol: f64,
    pub warp_max_evals: usize,
    pub variance_max_evals: usize,
}

impl ModelSpec {
    /// Defaults: λ = 0, five inner and outer iterations, fixed smoothness.
    pub fn new(basis: SplineBasis, warp: WarpConfig, amp_kernel: MaternKernel, warp_kernel: WarpKernel) -> Self {
        Self {
            basis,
            warp,
            amp_kernel,
            warp_kernel,
            lambda: 0.0,
            i_max: 5,
            j_max: 5,
            estimate_smoothness: false,
            bounds: VarianceBounds::default(),
            inner_tol: 1e-6,
            warp_max_evals: 1000,
            variance_max_evals: 600,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.i_max == 0 || self.j_max == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::Config("inner tolerance must be positive".into()));
        }
        self.bounds.gamma2.validate("gamma2")?;
        self.bounds.tau2.validate("tau2")?;
        self.bounds.alpha.validate("alpha")?;
        self.bounds.mu.validate("mu")?;
        MaternKernel::new(self.amp_kernel.scale, self.amp_kernel.alpha, self.amp_kernel.smoothness)?;
        if !(self.warp_kernel.scale() > 0.0) {
            return Err(Error::Config("warp scale must be positive".into()));
        }
        Ok(())
    }

    /// Starting variance parameters; `σ²` is profiled and starts at 1.
    pub fn initial_params(&self) -> VarianceParams {
        VarianceParams {
            sigma2: 1.0,
            gamma2: self.warp_kernel.scale(),
            tau2: self.amp_kernel.scale,
            alpha: self.amp_kernel.alpha,
            mu: self.amp_kernel.smoothness,
        }
    }
}

/// Spline coefficients of the shared template `c` and the centered
/// individual deviations `d_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub c: Vec<f64>,
    pub d: Vec<Vec<f64>>,
}

impl Templates {
    /// Coefficients of `θ + φ_i`.
    pub fn coef(&self, i: usize) -> Vec<f64> {
        self.c.iter().zip(&self.d[i]).map(|(a, b)| a + b).collect()
    }

    pub(crate) fn from_vectors(c: &DVector<f64>, d: &[DVector<f64>]) -> Self {
        Self {
            c: c.iter().cloned().collect(),
            d: d.iter().map(|v| v.iter().cloned().collect()).collect(),
        }
    }
}

/// Fixed warps per participant and random warps per curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warps {
    pub fixed: Vec<FixedWarp>,
    pub random: Vec<Vec<RandomWarpParams>>,
}

impl Warps {
    /// Identity warps shaped like `curves_per_participant`.
    pub fn identity(cfg: &WarpConfig, curves_per_participant: &[usize]) -> Self {
        Self {
            fixed: curves_per_participant.iter().map(|_| FixedWarp::identity(cfg)).collect(),
            random: curves_per_participant
                .iter()
                .map(|&n| vec![RandomWarpParams::zero(cfg.n_w); n])
                .collect(),
        }
    }

    /// Largest absolute difference over all anchor values.
    pub fn max_abs_diff(&self, other: &Warps) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.fixed.iter().zip(&other.fixed) {
            for (x, y) in a.values.iter().zip(&b.values) {
                d = d.max((x - y).abs());
            }
        }
        for (ra, rb) in self.random.iter().zip(&other.random) {
            for (a, b) in ra.iter().zip(rb) {
                for (x, y) in a.w.iter().zip(&b.w) {
                    d = d.max((x - y).abs());
                }
            }
        }
        d
    }
}

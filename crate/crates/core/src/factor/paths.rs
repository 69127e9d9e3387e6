//! Resampling of recorded 3-D paths onto aligned time.

use crate::basis::SplineBasis;
use crate::data::RawTrajectory;
use crate::error::{Error, Result};
use crate::warp::WarpConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Number of resampled time steps per path.
pub const PATH_POINTS: usize = 30;

/// Interior knots of the cubic smoothing basis.
pub const PATH_KNOTS: usize = 10;

/// A fitted warp of one curve: percentual time to template time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWarp {
    pub config: WarpConfig,
    /// Anchor values `ν + w`.
    pub values: Vec<f64>,
}

impl AlignmentWarp {
    pub fn identity(config: WarpConfig) -> Self {
        Self {
            values: config.anchors(),
            config,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.config.eval_values(&self.values, t.clamp(0.0, 1.0))
    }

    /// Smallest `t` in [0, 1] with `v(t) ≥ s`, by bisection.
    pub fn inverse(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        if self.eval(lo) >= s {
            return lo;
        }
        if self.eval(hi) < s {
            return hi;
        }
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Fits a cubic spline with [`PATH_KNOTS`] equidistant interior knots to each
/// coordinate over percentual time and evaluates it at the [`PATH_POINTS`]
/// times whose warped images are equidistant. Returns a `PATH_POINTS × 3`
/// matrix.
pub fn resample_path(traj: &RawTrajectory, warp: &AlignmentWarp) -> Result<DMatrix<f64>> {
    let coords = traj.coords()?;
    let n = traj.times.len();
    let knots = (1..=PATH_KNOTS).map(|k| k as f64 / (PATH_KNOTS + 1) as f64).collect();
    let basis = SplineBasis::new(3, knots, true)?;
    if n < basis.n_basis() {
        return Err(Error::InsufficientData(format!(
            "{}: {n} samples cannot determine {} spline coefficients",
            traj.label(),
            basis.n_basis()
        )));
    }
    let (t0, t1) = (traj.times[0], traj.times[n - 1]);
    if !(t1 > t0) {
        return Err(Error::DegenerateData(format!("{}: zero time span", traj.label())));
    }
    let pct: Vec<f64> = traj.times.iter().map(|t| ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)).collect();
    let phi = basis.design_matrix(&pct)?;
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::DegenerateData(format!(
            "{}: sample times do not determine the path spline",
            traj.label()
        )));
    }
    let eval_times: Vec<f64> = (0..PATH_POINTS)
        .map(|k| warp.inverse(k as f64 / (PATH_POINTS - 1) as f64))
        .collect();
    let phi_eval = basis.design_matrix(&eval_times)?;
    let mut out = DMatrix::zeros(PATH_POINTS, 3);
    for d in 0..3 {
        let y = DVector::from_iterator(n, coords.iter().map(|c| c[d]));
        let coef = svd.solve(&y, 0.0).map_err(|e| Error::Conditioning(e.into()))?;
        out.set_column(d, &(&phi_eval * coef));
    }
    Ok(out)
}

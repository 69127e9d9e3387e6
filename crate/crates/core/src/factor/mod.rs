//! Factor analysis of aligned 3-D movement paths.
//!
//! A path is a `T × D` matrix (time steps by coordinates), vectorized
//! coordinate-major so that index `d·T + t` holds coordinate `d` at step `t`.
//! Deviations from a reference path live in the span of `q` orthonormal
//! loadings, with weights made of a fixed height effect plus three nested
//! random effects (participant, participant × height, curve).

mod ecm;
mod paths;
mod simulate;

pub use ecm::{factor_loglik, fit_factor, squarem_step, EcmSettings, SquaremStep};
pub use paths::{resample_path, AlignmentWarp, PATH_KNOTS, PATH_POINTS};
pub use simulate::{simulate_factor_data, FactorTruth};

use crate::error::{Error, Result};
use crate::mathutil::{chi2_quantile, chi2_sf};
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Number of nested random-effect levels.
pub const N_LEVELS: usize = 3;

/// Names of the random-effect levels, outermost first.
pub const LEVEL_NAMES: [&str; N_LEVELS] = ["participant", "participant_height", "repetition"];

/// One resampled path with its design labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathObservation {
    pub participant: String,
    pub repetition: u32,
    /// 0-based height level; level 0 is the reference condition.
    pub height: usize,
    pub path: DMatrix<f64>,
}

/// Paths of one analysis (one obstacle distance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorData {
    pub observations: Vec<PathObservation>,
}

impl FactorData {
    pub fn new(observations: Vec<PathObservation>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::InsufficientData("no paths".into()))?;
        let (t, d) = first.path.shape();
        if t == 0 || d == 0 {
            return Err(Error::Validation("empty path matrix".into()));
        }
        for o in &observations {
            if o.path.shape() != (t, d) {
                return Err(Error::Validation(format!(
                    "path of participant {} repetition {} is {}×{}, expected {t}×{d}",
                    o.participant,
                    o.repetition,
                    o.path.nrows(),
                    o.path.ncols()
                )));
            }
            if o.path.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "path of participant {} repetition {} has non-finite entries",
                    o.participant, o.repetition
                )));
            }
        }
        Ok(Self { observations })
    }

    pub fn n_time(&self) -> usize {
        self.observations[0].path.nrows()
    }

    pub fn n_coord(&self) -> usize {
        self.observations[0].path.ncols()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Elementwise mean of the reference-height paths.
    pub fn reference_mean(&self) -> Result<DMatrix<f64>> {
        let refs: Vec<&PathObservation> = self.observations.iter().filter(|o| o.height == 0).collect();
        if refs.is_empty() {
            return Err(Error::InsufficientData("no paths at the reference height".into()));
        }
        let mut m = DMatrix::zeros(self.n_time(), self.n_coord());
        for o in &refs {
            m += &o.path;
        }
        Ok(m / refs.len() as f64)
    }

    /// Sum and sum of squares of all entries, used to recognize the same data.
    pub fn fingerprint(&self) -> [f64; 2] {
        let mut s = [0.0; 2];
        for o in &self.observations {
            for v in o.path.iter() {
                s[0] += v;
                s[1] += v * v;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Anova,
    Regression,
}

/// Fixed-effect design: one covariate row per height level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDesign {
    pub kind: DesignKind,
    pub rows: Vec<Vec<f64>>,
}

impl FactorDesign {
    /// Treatment coding against level 0: `(0,…,0)`, `(1,0,…)`, `(0,1,…)`, ….
    pub fn anova(n_heights: usize) -> Self {
        let p = n_heights.saturating_sub(1);
        let rows = (0..n_heights)
            .map(|h| (0..p).map(|k| if h == k + 1 { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            kind: DesignKind::Anova,
            rows,
        }
    }

    /// One covariate per height level, e.g. the height increase over the reference.
    pub fn regression(values: &[f64]) -> Self {
        Self {
            kind: DesignKind::Regression,
            rows: values.iter().map(|&v| vec![v]).collect(),
        }
    }

    pub fn n_heights(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, h: usize) -> Result<DVector<f64>> {
        self.rows
            .get(h)
            .map(|r| DVector::from_column_slice(r))
            .ok_or_else(|| Error::Config(format!("height level {h} not in the design ({} levels)", self.rows.len())))
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.n_cols(), |h, k| self.rows[h][k])
    }

    /// Checks row lengths, finiteness and full column rank over the
    /// height levels in `used`.
    pub fn validate(&self, used: &[usize]) -> Result<()> {
        let p = self.n_cols();
        if self.rows.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("design rows must have equal length and finite entries".into()));
        }
        let mut x = DMatrix::zeros(used.len(), p);
        for (r, &h) in used.iter().enumerate() {
            x.set_row(r, &self.row(h)?.transpose());
        }
        if p > 0 && rank(&x) < p {
            return Err(Error::Config(format!(
                "{:?} design does not have full column rank {p} on the observed heights",
                self.kind
            )));
        }
        Ok(())
    }
}

fn rank(x: &DMatrix<f64>) -> usize {
    if x.is_empty() {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let tol = 1e-10 * sv.max().max(f64::MIN_POSITIVE);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Fitted factor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub q: usize,
    pub n_time: usize,
    pub n_coord: usize,
    /// Reference path (`T × D`).
    pub theta: DMatrix<f64>,
    /// Orthonormal loadings (`T·D × q`).
    pub w: DMatrix<f64>,
    /// Fixed-effect weights (`p × q`).
    pub beta: DMatrix<f64>,
    /// Latent covariance per random level, outermost first.
    pub psi: Vec<DMatrix<f64>>,
    /// Noise variance per coordinate.
    pub lambda: DVector<f64>,
    pub loglik: f64,
    pub design: FactorDesign,
    pub n_curves: usize,
    pub data_fingerprint: [f64; 2],
    /// Log-likelihood at the start and after every accepted update.
    pub trace: Vec<f64>,
    /// Cumulative ECM sweeps at each trace entry.
    pub trace_sweeps: Vec<usize>,
    pub sweeps: usize,
    pub converged: bool,
}

impl FactorModel {
    /// Loadings column `k` as a `T × D` path deviation.
    pub fn loading(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n_time, self.n_coord, self.w.column(k).as_slice())
    }

    /// Mean path at height level `h`: `θ + X_h β Wᵀ`.
    pub fn mean_path(&self, h: usize) -> Result<DMatrix<f64>> {
        let x = self.design.row(h)?;
        let dev = &self.w * (self.beta.transpose() * x);
        Ok(&self.theta + DMatrix::from_column_slice(self.n_time, self.n_coord, dev.as_slice()))
    }

    /// Coordinate covariance at time step `t` contributed by random level `l`.
    pub fn level_covariance(&self, l: usize, t: usize) -> Result<Matrix3<f64>> {
        if self.n_coord != 3 {
            return Err(Error::Dimension {
                expected: 3,
                got: self.n_coord,
            });
        }
        if l >= N_LEVELS || t >= self.n_time {
            return Err(Error::Parameter(format!("level {l} or time step {t} out of range")));
        }
        let rows = DMatrix::from_fn(3, self.q, |d, k| self.w[(d * self.n_time + t, k)]);
        let c = &rows * &self.psi[l] * rows.transpose();
        Ok(Matrix3::from_fn(|r, s| c[(r, s)]))
    }

    /// Share of each loading in the total per-curve variance (latent plus
    /// noise), read off the diagonal of `Σ_l Ψ_l` since `WᵀW = I`.
    pub fn loading_shares(&self) -> Vec<f64> {
        let total_psi: DMatrix<f64> = self.psi.iter().fold(DMatrix::zeros(self.q, self.q), |a, p| a + p);
        let noise = self.n_time as f64 * self.lambda.sum();
        let total = total_psi.trace() + noise;
        (0..self.q).map(|k| total_psi[(k, k)] / total).collect()
    }

    /// Writes scree rows `distance,q,loading_index,share`.
    pub fn write_scree_csv<W: Write>(&self, writer: W, distance: &str, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        if header {
            w.write_record(["distance", "q", "loading_index", "share"]).map_err(io)?;
        }
        for (k, s) in self.loading_shares().iter().enumerate() {
            w.write_record([distance.to_string(), self.q.to_string(), (k + 1).to_string(), format!("{s:.10}")])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Variance shares of the random levels and the noise in one curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceShares {
    pub levels: [f64; N_LEVELS],
    pub noise: f64,
}

/// `tr(W Ψ_l Wᵀ)` and `T·ΣΛ` as fractions of their sum.
pub fn variance_decomposition(model: &FactorModel) -> VarianceShares {
    let tr: Vec<f64> = model
        .psi
        .iter()
        .map(|p| (&model.w * p * model.w.transpose()).trace())
        .collect();
    let noise = model.n_time as f64 * model.lambda.sum();
    let total = tr.iter().sum::<f64>() + noise;
    let mut levels = [0.0; N_LEVELS];
    for (l, v) in tr.iter().enumerate() {
        levels[l] = v / total;
    }
    VarianceShares {
        levels,
        noise: noise / total,
    }
}

/// Likelihood-ratio test of a regression design nested in an ANOVA design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Tests the restricted (`regression`) fit against the full (`anova`) fit.
/// Degrees of freedom are `q` times the difference in design columns.
pub fn lrt_linear_height(anova: &FactorModel, regression: &FactorModel) -> Result<LrtResult> {
    if anova.q != regression.q {
        return Err(Error::Config(format!(
            "models differ in the number of loadings ({} vs {})",
            anova.q, regression.q
        )));
    }
    let same_data = anova.n_curves == regression.n_curves
        && anova
            .data_fingerprint
            .iter()
            .zip(&regression.data_fingerprint)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
    if !same_data {
        return Err(Error::Config("models were fitted to different data".into()));
    }
    let (xa, xr) = (anova.design.matrix(), regression.design.matrix());
    let pa = anova.design.n_cols();
    let pr = regression.design.n_cols();
    let nested = xa.nrows() == xr.nrows() && pr < pa && {
        let mut joint = DMatrix::zeros(xa.nrows(), pa + pr);
        joint.view_mut((0, 0), (xa.nrows(), pa)).copy_from(&xa);
        joint.view_mut((0, pa), (xr.nrows(), pr)).copy_from(&xr);
        rank(&joint) == rank(&xa)
    };
    if !nested {
        return Err(Error::Config("regression design is not nested in the ANOVA design".into()));
    }
    let statistic = 2.0 * (anova.loglik - regression.loglik);
    if statistic < -1e-6 {
        log::warn!("restricted fit has higher log-likelihood (2Δ = {statistic:.3e}); optimizer did not reach the full-model maximum");
    }
    let df = anova.q * (pa - pr);
    Ok(LrtResult {
        statistic,
        df,
        p_value: chi2_sf(statistic.max(0.0), df as f64)?,
    })
}

/// Prediction ellipsoid of a 3-D Gaussian: principal axes (unit vectors,
/// descending variance) and radii `sqrt(λ_k χ²₃(level))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub axes: [Vector3<f64>; 3],
    pub radii: [f64; 3],
}

pub fn prediction_ellipsoid(cov: &Matrix3<f64>, level: f64) -> Result<Ellipsoid> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariance has non-finite entries".into()));
    }
    if (cov - cov.transpose()).abs().max() > 1e-10 * cov.abs().max().max(1.0) {
        return Err(Error::Validation("covariance is not symmetric".into()));
    }
    let q = chi2_quantile(level, 3.0)?;
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = [Vector3::zeros(); 3];
    let mut radii = [0.0; 3];
    for (k, &i) in idx.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        if lam < -1e-8 {
            return Err(Error::Validation(format!("covariance has negative eigenvalue {lam:.3e}")));
        }
        axes[k] = eig.eigenvectors.column(i).into_owned();
        radii[k] = (lam.max(0.0) * q).sqrt();
    }
    Ok(Ellipsoid { axes, radii })
}

/// Ellipsoids of every random level at `n` equidistant time steps along the
/// mean path of height `h`, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidRecord {
    pub level: String,
    pub height: usize,
    pub time_step: usize,
    pub center: Vector3<f64>,
    pub ellipsoid: Ellipsoid,
}

pub fn path_ellipsoids(model: &FactorModel, h: usize, n: usize, level: f64) -> Result<Vec<EllipsoidRecord>> {
    let mean = model.mean_path(h)?;
    let steps: Vec<usize> = if n <= 1 {
        vec![0]
    } else {
        (0..n)
            .map(|k| ((k as f64 * (model.n_time - 1) as f64) / (n - 1) as f64).round() as usize)
            .collect()
    };
    let mut out = Vec::new();
    for (l, name) in LEVEL_NAMES.iter().enumerate() {
        for &t in &steps {
            let cov = model.level_covariance(l, t)?;
            out.push(EllipsoidRecord {
                level: (*name).into(),
                height: h,
                time_step: t,
                center: Vector3::new(mean[(t, 0)], mean[(t, 1)], mean[(t, 2)]),
                ellipsoid: prediction_ellipsoid(&cov, level)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn chi2_95() -> f64 {
        chi2_quantile(0.95, 3.0).unwrap()
    }

    #[test]
    fn identity_ellipsoid_has_equal_radii() {
        let e = prediction_ellipsoid(&Matrix3::identity(), 0.95).unwrap();
        for r in e.radii {
            assert!((r - chi2_95().sqrt()).abs() < 1e-9);
        }
        assert!((chi2_95() - 7.8147).abs() < 1e-4);
    }

    #[test]
    fn diagonal_ellipsoid_follows_coordinate_axes() {
        let e = prediction_ellipsoid(&Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.0)), 0.95).unwrap();
        assert!((e.radii[0] / e.radii[1] - 2.0).abs() < 1e-12);
        assert_eq!(e.radii[2], 0.0);
        for k in 0..3 {
            assert!((e.axes[k][k].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipsoid_rotates_with_covariance() {
        let s = Matrix3::new(3.0, 0.4, 0.1, 0.4, 2.0, -0.3, 0.1, -0.3, 1.0);
        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let a = prediction_ellipsoid(&s, 0.9).unwrap();
        let b = prediction_ellipsoid(&(r * s * r.transpose()), 0.9).unwrap();
        for k in 0..3 {
            assert!((a.radii[k] - b.radii[k]).abs() < 1e-10);
            assert!((r * a.axes[k]).dot(&b.axes[k]).abs() > 1.0 - 1e-10);
        }
    }

    #[test]
    fn negative_eigenvalues_are_rejected() {
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1e-3));
        assert!(prediction_ellipsoid(&s, 0.95).is_err());
        let tiny = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1e-12));
        assert_eq!(prediction_ellipsoid(&tiny, 0.95).unwrap().radii[2], 0.0);
    }

    #[test]
    fn anova_design_uses_treatment_coding() {
        let d = FactorDesign::anova(3);
        assert_eq!(d.rows, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(d.validate(&[0, 1, 2]).is_ok());
        assert!(d.validate(&[0, 1]).is_err());
        assert!(FactorDesign::regression(&[0.0, 7.5, 15.0]).validate(&[0, 1, 2]).is_ok());
        assert!(FactorDesign::regression(&[0.0, 0.0, 0.0]).validate(&[0, 1, 2]).is_err());
    }
}

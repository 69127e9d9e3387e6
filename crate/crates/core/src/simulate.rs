//! Sampling from the warped mixed-effects model and parameter-recovery studies.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cov::{build_cov, MaternKernel, SpdFactor, WarpKernel};
use crate::data::{ConditionDataset, FunctionalSample, Normalization, TimeMode};
use crate::error::{Error, Result};
use crate::mixedmodel::{fit, FittedModel, ModelSpec, Templates, VarianceParams, Warps};
use crate::warp::{enforce_homeomorphism, eval_warp, FixedWarp, RandomWarpParams, WarpConfig};

/// Generating parameters. Zero variance parameters are allowed and switch
/// the corresponding effect off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub basis: SplineBasis,
    pub warp: WarpConfig,
    /// Prior family of the disparities; its scale is taken from `params.gamma2`.
    pub warp_kernel: WarpKernel,
    pub templates: Templates,
    pub fixed: Vec<FixedWarp>,
    pub params: VarianceParams,
}

impl Truth {
    pub fn from_model(model: &FittedModel) -> Self {
        Self {
            basis: model.spec.basis.clone(),
            warp: model.spec.warp,
            warp_kernel: model.spec.warp_kernel,
            templates: model.templates.clone(),
            fixed: model.warps.fixed.clone(),
            params: model.params,
        }
    }

    /// Reference scenario with the variance magnitudes reported for the
    /// motion-capture acceleration data: 12 cubic basis functions, one warp
    /// anchor, bridge prior, σ² = 1.4e-4, γ² = 14.1, τ² = 54.4, range
    /// 8.2e-3, μ = 6.2. The template is the minimum-jerk acceleration
    /// scaled to unit span; individual coefficient offsets and fixed anchor
    /// shifts are N(0, 0.03²) draws from ChaCha20 seeded with `seed`.
    pub fn reference_scenario(n_participants: usize, seed: u64) -> Result<Self> {
        if n_participants == 0 {
            return Err(Error::Parameter("at least one participant is needed".into()));
        }
        let basis = SplineBasis::equidistant(12, 3)?;
        let k = basis.n_basis();
        let t: Vec<f64> = (0..400).map(|j| j as f64 / 399.0).collect();
        let y = DVector::from_iterator(
            t.len(),
            t.iter().map(|&x| (60.0 * x - 180.0 * x * x + 120.0 * x * x * x) / 11.55),
        );
        let c = basis
            .design_matrix(&t)?
            .svd(true, true)
            .solve(&y, 0.0)
            .map_err(|e| Error::Conditioning(e.into()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut d: Vec<Vec<f64>> = (0..n_participants)
            .map(|_| (0..k).map(|_| 0.03 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        for j in 0..k {
            let mean = d.iter().map(|v| v[j]).sum::<f64>() / n_participants as f64;
            d.iter_mut().for_each(|v| v[j] -= mean);
        }
        let warp = WarpConfig::linear(1);
        // A common shift of all fixed warps is absorbed by the template, so
        // the offsets are centered like the participant effects.
        let offsets: Vec<f64> = (0..n_participants).map(|_| 0.03 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shift = offsets.iter().sum::<f64>() / n_participants as f64;
        let fixed = offsets
            .iter()
            .map(|o| FixedWarp {
                values: vec![0.5 + o - shift],
            })
            .collect();
        Ok(Self {
            basis,
            warp,
            warp_kernel: WarpKernel::bridge(14.1)?,
            templates: Templates { c: c.as_slice().to_vec(), d },
            fixed,
            params: VarianceParams {
                sigma2: 1.4e-4,
                gamma2: 14.1,
                tau2: 54.4,
                alpha: 1.0 / 8.2e-3,
                mu: 6.2,
            },
        })
    }

    pub fn n_participants(&self) -> usize {
        self.fixed.len()
    }

    /// `(θ + φ_i)∘ν_i` at `t`.
    pub fn participant_curve(&self, i: usize, t: &[f64]) -> Result<Vec<f64>> {
        curve(&self.basis, &self.warp, &self.templates.coef(i), &self.fixed[i], None, t)
    }

    pub fn template(&self, t: &[f64]) -> Result<Vec<f64>> {
        t.iter().map(|&x| Ok(self.basis.eval_spline(&self.templates.c, x)?.0)).collect()
    }

    fn validate(&self) -> Result<()> {
        let p = &self.params;
        for (name, v) in [("sigma2", p.sigma2), ("gamma2", p.gamma2), ("tau2", p.tau2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.templates.d.len() != self.fixed.len() {
            return Err(Error::Dimension {
                expected: self.fixed.len(),
                got: self.templates.d.len(),
            });
        }
        let k = self.basis.n_basis();
        if self.templates.c.len() != k || self.templates.d.iter().any(|d| d.len() != k) {
            return Err(Error::Dimension {
                expected: k,
                got: self.templates.c.len(),
            });
        }
        if self.fixed.iter().any(|f| f.values.len() != self.warp.n_w) {
            return Err(Error::Dimension {
                expected: self.warp.n_w,
                got: self.fixed[0].values.len(),
            });
        }
        Ok(())
    }
}

fn curve(
    basis: &SplineBasis,
    cfg: &WarpConfig,
    coef: &[f64],
    fixed: &FixedWarp,
    random: Option<&RandomWarpParams>,
    t: &[f64],
) -> Result<Vec<f64>> {
    let u = eval_warp(cfg, fixed, random, t)?;
    u.iter().map(|&x| Ok(basis.eval_spline(coef, x.clamp(0.0, 1.0))?.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n_repetitions: usize,
    /// Observation times shared by all curves.
    pub grid: Vec<f64>,
    pub seed: u64,
    pub condition: String,
}

impl SimDesign {
    /// `m` equidistant observation times on [0, 1].
    pub fn equidistant(n_repetitions: usize, m: usize, seed: u64) -> Self {
        let grid = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
        Self {
            n_repetitions,
            grid,
            seed,
            condition: "simulated".into(),
        }
    }
}

/// A simulated dataset with the random warps that generated it.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: ConditionDataset,
    pub warps: Warps,
}

/// Generator for replicate `r` of a study seeded with `seed`; replicates use
/// disjoint ChaCha streams.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Simulates one dataset from stream 0 of `design.seed`.
pub fn simulate_dataset(truth: &Truth, design: &SimDesign) -> Result<SimulatedData> {
    simulate_with_rng(truth, design, &mut replicate_rng(design.seed, 0))
}

/// Simulates `y_ij = (θ + φ_i)∘(ν_i + v_ij) + x_ij + ε_ij` on the design grid.
///
/// Disparities are drawn from `N(0, σ²γ²C₁)` and projected onto increasing
/// warps, amplitude effects from `N(0, σ²τ²R)` with the Matérn correlation
/// `R`, noise from `N(0, σ²I)`.
pub fn simulate_with_rng(truth: &Truth, design: &SimDesign, rng: &mut ChaCha20Rng) -> Result<SimulatedData> {
    truth.validate()?;
    if design.n_repetitions == 0 || design.grid.len() < 2 {
        return Err(Error::Parameter("design needs at least one repetition and two time points".into()));
    }
    if design.grid.iter().any(|t| !(0.0..=1.0).contains(t)) || design.grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Parameter("design grid must be increasing inside [0, 1]".into()));
    }
    let p = &truth.params;
    let n_w = truth.warp.n_w;
    let m = design.grid.len();
    let warp_l = if n_w > 0 && p.sigma2 * p.gamma2 > 0.0 {
        let c = build_cov(&truth.warp_kernel.with_scale(p.sigma2 * p.gamma2), &truth.warp.anchors());
        Some(SpdFactor::new(c)?.lower())
    } else {
        None
    };
    let amp_l = if p.sigma2 * p.tau2 > 0.0 {
        let k = MaternKernel::new(p.sigma2 * p.tau2, p.alpha, p.mu)?;
        Some(SpdFactor::new(build_cov(&k, &design.grid))?.lower())
    } else {
        None
    };
    let noise_sd = p.sigma2.sqrt();
    let normals = |rng: &mut ChaCha20Rng, n: usize| -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    };

    let mut samples = Vec::new();
    let mut random = Vec::with_capacity(truth.n_participants());
    for i in 0..truth.n_participants() {
        let coef = truth.templates.coef(i);
        let mut ri = Vec::with_capacity(design.n_repetitions);
        for j in 0..design.n_repetitions {
            let w_raw = match &warp_l {
                Some(l) => l * normals(rng, n_w),
                None => DVector::zeros(n_w),
            };
            let h = enforce_homeomorphism(
                &truth.warp,
                &truth.fixed[i],
                Some(&RandomWarpParams {
                    w: w_raw.iter().cloned().collect(),
                }),
            );
            let f = curve(&truth.basis, &truth.warp, &coef, &h.fixed, Some(&h.rand), &design.grid)?;
            let x = match &amp_l {
                Some(l) => l * normals(rng, m),
                None => DVector::zeros(m),
            };
            let eps = normals(rng, m) * noise_sd;
            let values = (0..m).map(|k| f[k] + x[k] + eps[k]).collect();
            samples.push(FunctionalSample {
                condition: design.condition.clone(),
                participant: format!("p{:02}", i + 1),
                repetition: (j + 1) as u32,
                times: design.grid.clone(),
                values,
            });
            ri.push(h.rand);
        }
        random.push(ri);
    }
    let dataset = ConditionDataset::from_samples(
        samples,
        Normalization {
            mode: TimeMode::Percentual,
            time_origin: 0.0,
            time_span: 1.0,
            value_span: 1.0,
        },
    )?;
    Ok(SimulatedData {
        dataset,
        warps: Warps {
            fixed: truth.fixed.clone(),
            random,
        },
    })
}

/// Integrated squared difference on `grid` by the trapezoid rule.
fn spline_values(basis: &SplineBasis, coef: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    t.iter().map(|&x| Ok(basis.eval_spline(coef, x)?.0)).collect()
}

pub fn integrated_squared_error(grid: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    (1..grid.len())
        .map(|k| 0.5 * (grid[k] - grid[k - 1]) * (sq[k] + sq[k - 1]))
        .sum()
}

/// Ordinary least-squares spline fit at identity warps, one per participant
/// plus one pooled over all curves. Returns (pooled, per participant).
pub fn ols_templates(basis: &SplineBasis, data: &ConditionDataset) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = basis.n_basis();
    let solve = |m: DMatrix<f64>, b: DVector<f64>| -> Result<Vec<f64>> {
        let svd = m.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        let x = svd.solve(&b, tol).map_err(|e| Error::Conditioning(e.to_string()))?;
        Ok(x.iter().cloned().collect())
    };
    let mut total_m = DMatrix::zeros(k, k);
    let mut total_b = DVector::zeros(k);
    let mut per = Vec::with_capacity(data.n_participants());
    for p in &data.participants {
        let mut m = DMatrix::zeros(k, k);
        let mut b = DVector::zeros(k);
        for s in &p.samples {
            let phi = basis.design_matrix(&s.times)?;
            m += phi.transpose() * &phi;
            b += phi.transpose() * DVector::from_column_slice(&s.values);
        }
        total_m += &m;
        total_b += &b;
        per.push(solve(m, b)?);
    }
    Ok((solve(total_m, total_b)?, per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub n_sim: usize,
    pub seed: u64,
    /// Specification used to fit each replicate.
    pub spec: ModelSpec,
    /// Points of the quadrature grid for template errors.
    pub quadrature_points: usize,
}

/// Results of one replicate. Template errors are integrated squared errors
/// of `θ` and of `θ + φ_i` (averaged over participants) in template time;
/// the OLS baseline fits the same spline at identity warps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub participant_l2_fit: f64,
    pub participant_l2_ols: f64,
    pub template_l2_fit: f64,
    pub template_l2_ols: f64,
    /// Mean of `ν̂ − ν` over participants and anchors.
    pub fixed_warp_bias: f64,
    /// Root mean square of `ŵ − w` over curves and anchors.
    pub random_warp_rmse: f64,
    pub sigma2: f64,
    pub gamma2: f64,
    pub tau2: f64,
    pub alpha: f64,
    pub mu: f64,
    pub nll: f64,
    #[serde(skip)]
    pub fixed_warp_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| quantile_sorted(&v, p);
        Self {
            q05: q(0.05),
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            q95: q(0.95),
        }
    }
}

/// Linear-interpolation quantile of sorted data (NaN if empty).
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    Quantiles::of(values).median
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub n_sim: usize,
    pub n_failed: usize,
    pub truth: VarianceParams,
    pub participant_l2_fit: Quantiles,
    pub participant_l2_ols: Quantiles,
    pub template_l2_fit: Quantiles,
    pub template_l2_ols: Quantiles,
    /// Pooled `ν̂ − ν` over replicates, participants and anchors.
    pub fixed_warp_error: Quantiles,
    pub random_warp_rmse: Quantiles,
    pub sigma: Quantiles,
    pub sigma_gamma: Quantiles,
    pub sigma_tau: Quantiles,
    pub tau: Quantiles,
    pub range: Quantiles,
    pub mu: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub records: Vec<ReplicateRecord>,
    pub summary: RecoverySummary,
}

impl RecoveryReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

fn run_replicate(truth: &Truth, design: &SimDesign, config: &RecoveryConfig, r: usize) -> Result<ReplicateRecord> {
    let sim = simulate_with_rng(truth, design, &mut replicate_rng(config.seed, r as u64 + 1))?;
    let model = fit(&sim.dataset, &config.spec)?;
    let (ols_c, ols_per) = ols_templates(&config.spec.basis, &sim.dataset)?;
    let q = config.quadrature_points.max(2);
    let grid: Vec<f64> = (0..q).map(|k| k as f64 / (q - 1) as f64).collect();
    let n_p = truth.n_participants();
    let mut l2_fit = 0.0;
    let mut l2_ols = 0.0;
    for i in 0..n_p {
        let true_curve = spline_values(&truth.basis, &truth.templates.coef(i), &grid)?;
        let fitted = spline_values(&config.spec.basis, &model.templates.coef(i), &grid)?;
        let ols = spline_values(&config.spec.basis, &ols_per[i], &grid)?;
        l2_fit += integrated_squared_error(&grid, &fitted, &true_curve);
        l2_ols += integrated_squared_error(&grid, &ols, &true_curve);
    }
    let true_template = truth.template(&grid)?;
    let fit_template = model.template(&grid)?;
    let ols_template = spline_values(&config.spec.basis, &ols_c, &grid)?;

    let mut fixed_errors = Vec::new();
    for i in 0..n_p {
        for (a, b) in model.warps.fixed[i].values.iter().zip(&truth.fixed[i].values) {
            fixed_errors.push(a - b);
        }
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (ri, ti) in model.warps.random.iter().zip(&sim.warps.random) {
        for (a, b) in ri.iter().zip(ti) {
            for (x, y) in a.w.iter().zip(&b.w) {
                sq += (x - y).powi(2);
                count += 1;
            }
        }
    }
    let p = model.params;
    Ok(ReplicateRecord {
        replicate: r,
        participant_l2_fit: l2_fit / n_p as f64,
        participant_l2_ols: l2_ols / n_p as f64,
        template_l2_fit: integrated_squared_error(&grid, &fit_template, &true_template),
        template_l2_ols: integrated_squared_error(&grid, &ols_template, &true_template),
        fixed_warp_bias: if fixed_errors.is_empty() {
            0.0
        } else {
            fixed_errors.iter().sum::<f64>() / fixed_errors.len() as f64
        },
        random_warp_rmse: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
        sigma2: p.sigma2,
        gamma2: p.gamma2,
        tau2: p.tau2,
        alpha: p.alpha,
        mu: p.mu,
        nll: model.nll,
        fixed_warp_errors: fixed_errors,
    })
}

/// Simulates `n_sim` datasets, fits each with the configured specification
/// and an OLS baseline at identity warps, and summarizes the errors.
/// Failed replicates are logged and counted, not fatal.
pub fn recovery_study(truth: &Truth, design: &SimDesign, config: &RecoveryConfig) -> Result<RecoveryReport> {
    if config.n_sim == 0 {
        return Err(Error::Parameter("n_sim must be at least 1".into()));
    }
    truth.validate()?;
    config.spec.validate()?;
    let results: Vec<Result<ReplicateRecord>> = (0..config.n_sim)
        .into_par_iter()
        .map(|r| run_replicate(truth, design, config, r))
        .collect();
    let mut records = Vec::with_capacity(config.n_sim);
    let mut n_failed = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                warn!("replicate {r} failed: {e}");
                n_failed += 1;
            }
        }
    }
    let col = |f: &dyn Fn(&ReplicateRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    let fixed: Vec<f64> = records.iter().flat_map(|r| r.fixed_warp_errors.iter().cloned()).collect();
    let summary = RecoverySummary {
        n_sim: config.n_sim,
        n_failed,
        truth: truth.params,
        participant_l2_fit: Quantiles::of(&col(&|r| r.participant_l2_fit)),
        participant_l2_ols: Quantiles::of(&col(&|r| r.participant_l2_ols)),
        template_l2_fit: Quantiles::of(&col(&|r| r.template_l2_fit)),
        template_l2_ols: Quantiles::of(&col(&|r| r.template_l2_ols)),
        fixed_warp_error: Quantiles::of(&fixed),
        random_warp_rmse: Quantiles::of(&col(&|r| r.random_warp_rmse)),
        sigma: Quantiles::of(&col(&|r| r.sigma2.sqrt())),
        sigma_gamma: Quantiles::of(&col(&|r| (r.sigma2 * r.gamma2).sqrt())),
        sigma_tau: Quantiles::of(&col(&|r| (r.sigma2 * r.tau2).sqrt())),
        tau: Quantiles::of(&col(&|r| r.tau2.sqrt())),
        range: Quantiles::of(&col(&|r| 1.0 / r.alpha)),
        mu: Quantiles::of(&col(&|r| r.mu)),
    };
    Ok(RecoveryReport { records, summary })
}

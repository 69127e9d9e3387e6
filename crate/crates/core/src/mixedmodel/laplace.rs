use nalgebra::{Cholesky, DMatrix, DVector};

use super::context::{amp_factor, ModelContext};
use super::{Templates, VarianceParams, Warps};
use crate::cov::{build_cov, MaternKernel, SpdFactor};
use crate::error::{Error, Result};
use crate::mathutil::{bounded_minimize, nelder_mead, OptimizerSettings};
use crate::warp::combined_values;

/// First-order expansion of one curve around its predicted warp `w⁰`.
#[derive(Debug, Clone)]
pub struct CurveLinearization {
    /// Template evaluated at the predicted warp.
    pub theta: DVector<f64>,
    /// Warp design: slope of the template times the warp Jacobian.
    pub z: DMatrix<f64>,
    /// `y − ϑ + Z w⁰`.
    pub resid: DVector<f64>,
    pub(crate) grid: usize,
}

/// Linear mixed model `y ≈ ϑ − Zw⁰ + Zw + x + ε`, block diagonal per curve.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub curves: Vec<Vec<CurveLinearization>>,
    pub m: usize,
}

pub fn linearize(ctx: &ModelContext, templates: &Templates, warps: &Warps) -> Result<LinearizedSystem> {
    let cfg = &ctx.spec.warp;
    let basis = &ctx.spec.basis;
    let n_w = cfg.n_w;
    let mut g = vec![0.0; n_w];
    let mut out = Vec::with_capacity(ctx.curves.len());
    for (i, curves) in ctx.curves.iter().enumerate() {
        let coef = templates.coef(i);
        let mut pc = Vec::with_capacity(curves.len());
        for (j, cv) in curves.iter().enumerate() {
            let w0 = &warps.random[i][j].w;
            let a = combined_values(&warps.fixed[i], Some(&warps.random[i][j]));
            let m = cv.t.len();
            let mut theta = DVector::zeros(m);
            let mut z = DMatrix::zeros(m, n_w);
            for (r, &t) in cv.t.iter().enumerate() {
                let u = cfg.eval_with_gradient(&a, t, Some(&mut g));
                let (f, df) = basis.eval_spline(&coef, u.clamp(0.0, 1.0))?;
                theta[r] = f;
                if u > 0.0 && u < 1.0 {
                    for k in 0..n_w {
                        z[(r, k)] = df * g[k];
                    }
                }
            }
            let resid = &cv.y - &theta + &z * DVector::from_column_slice(w0);
            pc.push(CurveLinearization {
                theta,
                z,
                resid,
                grid: cv.grid,
            });
        }
        out.push(pc);
    }
    Ok(LinearizedSystem { curves: out, m: ctx.m() })
}

/// Evaluates `Σ log det V_ij` and `Σ ‖r_ij‖²_{V_ij}` with
/// `V = (I + S) + Z C Z'` through the Woodbury identity, so only the
/// per-grid `I + S` needs a full factorization.
struct LaplaceEvaluator<'a> {
    ctx: &'a ModelContext<'a>,
    sys: &'a LinearizedSystem,
    /// `Z L₁` with `C = γ² L₁L₁'`.
    z1: Vec<Vec<DMatrix<f64>>>,
}

impl<'a> LaplaceEvaluator<'a> {
    fn new(ctx: &'a ModelContext<'a>, sys: &'a LinearizedSystem) -> Result<Self> {
        let anchors = ctx.spec.warp.anchors();
        let l1 = if anchors.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            SpdFactor::new(build_cov(&ctx.spec.warp_kernel.with_scale(1.0), &anchors))?.lower()
        };
        let z1 = sys
            .curves
            .iter()
            .map(|pc| pc.iter().map(|c| &c.z * &l1).collect())
            .collect();
        Ok(Self { ctx, sys, z1 })
    }

    fn terms(&self, params: &VarianceParams) -> Result<(f64, f64)> {
        let kernel = MaternKernel::new(params.tau2, params.alpha, params.mu)?;
        let factors = self
            .ctx
            .grids
            .iter()
            .map(|t| amp_factor(&kernel, t))
            .collect::<Result<Vec<_>>>()?;
        let logdet_a: Vec<f64> = factors.iter().map(|f| f.logdet()).collect();
        let n_w = self.ctx.spec.warp.n_w;
        let sg = params.gamma2.sqrt();
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for (pc, z1s) in self.sys.curves.iter().zip(&self.z1) {
            for (c, z1) in pc.iter().zip(z1s) {
                let f = &factors[c.grid];
                let q = f.whiten(&c.resid);
                logdet += logdet_a[c.grid];
                quad += q.norm_squared();
                if n_w == 0 {
                    continue;
                }
                let p = f.whiten_mat(z1) * sg;
                let mut small = p.transpose() * &p;
                for k in 0..n_w {
                    small[(k, k)] += 1.0;
                }
                let b = p.transpose() * &q;
                let ch = Cholesky::new(small)
                    .ok_or_else(|| Error::Conditioning("warp block of the marginal covariance".into()))?;
                logdet += 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                quad -= b.dot(&ch.solve(&b));
            }
        }
        Ok((logdet, quad.max(0.0)))
    }
}

/// `m log σ² + Σ log det V_ij + σ⁻² Σ ‖y_ij − ϑ_ij + Z_ij w⁰_ij‖²_{V_ij}`:
/// twice the negative log likelihood of the linearized model, without the
/// `m log 2π` constant.
pub fn laplace_nll(ctx: &ModelContext, sys: &LinearizedSystem, params: &VarianceParams) -> Result<f64> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::Parameter(format!("sigma2 must be positive, got {}", params.sigma2)));
    }
    let (logdet, quad) = LaplaceEvaluator::new(ctx, sys)?.terms(params)?;
    let m = sys.m as f64;
    Ok(m * params.sigma2.ln() + logdet + quad / params.sigma2)
}

/// [`laplace_nll`] with `σ²` replaced by its closed-form optimum `RSS_V / m`;
/// returns the value and that `σ̂²`.
pub fn profile_nll(ctx: &ModelContext, sys: &LinearizedSystem, params: &VarianceParams) -> Result<(f64, f64)> {
    profile_from(&LaplaceEvaluator::new(ctx, sys)?, params)
}

fn profile_from(ev: &LaplaceEvaluator, params: &VarianceParams) -> Result<(f64, f64)> {
    let (logdet, quad) = ev.terms(params)?;
    let m = ev.sys.m as f64;
    let sigma2 = quad / m;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateData("weighted residual sum of squares is zero".into()));
    }
    Ok((m * sigma2.ln() + logdet + m, sigma2))
}

/// Which variance parameters are searched over.
#[derive(Clone, Copy)]
struct Layout {
    gamma2: bool,
    mu: bool,
}

impl Layout {
    fn encode(&self, p: &VarianceParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(4);
        if self.gamma2 {
            x.push(p.gamma2.ln());
        }
        x.push(p.tau2.ln());
        x.push(p.alpha.ln());
        if self.mu {
            x.push(p.mu.ln());
        }
        x
    }

    fn decode(&self, x: &[f64], base: &VarianceParams) -> VarianceParams {
        let mut p = *base;
        let mut k = 0;
        if self.gamma2 {
            p.gamma2 = x[k].exp();
            k += 1;
        }
        p.tau2 = x[k].exp();
        p.alpha = x[k + 1].exp();
        if self.mu {
            p.mu = x[k + 2].exp();
        }
        p
    }
}

/// Minimizes the profile Laplace likelihood over the log variance
/// parameters within the configured box, by a simplex search followed by a
/// quasi-Newton polish. Returns the parameters (with `σ̂²`) and the value,
/// never worse than at `start`.
pub fn estimate_variance(ctx: &ModelContext, sys: &LinearizedSystem, start: &VarianceParams) -> Result<(VarianceParams, f64)> {
    let spec = ctx.spec;
    let ev = LaplaceEvaluator::new(ctx, sys)?;
    let layout = Layout {
        gamma2: spec.warp.n_w > 0,
        mu: spec.estimate_smoothness,
    };
    let b = &spec.bounds;
    let mut lo = VarianceParams { ..*start };
    let mut hi = VarianceParams { ..*start };
    lo.gamma2 = b.gamma2.lower;
    hi.gamma2 = b.gamma2.upper;
    lo.tau2 = b.tau2.lower;
    hi.tau2 = b.tau2.upper;
    lo.alpha = b.alpha.lower;
    hi.alpha = b.alpha.upper;
    lo.mu = b.mu.lower;
    hi.mu = b.mu.upper;
    let lower = layout.encode(&lo);
    let upper = layout.encode(&hi);
    let x0: Vec<f64> = layout
        .encode(start)
        .iter()
        .zip(lower.iter().zip(&upper))
        .map(|(x, (l, u))| x.clamp(*l, *u))
        .collect();

    let objective = |x: &[f64]| -> f64 {
        profile_from(&ev, &layout.decode(x, start))
            .map(|(v, _)| v)
            .unwrap_or(f64::INFINITY)
    };
    let start_value = objective(&x0);
    let settings = OptimizerSettings {
        max_evals: spec.variance_max_evals,
        f_tol: 1e-10,
        restarts: 2,
        ..OptimizerSettings::default()
    }
    .with_bounds(lower, upper);
    let step = vec![0.7; x0.len()];
    let nm = nelder_mead(objective, &x0, &step, &settings)?;
    let polish_settings = OptimizerSettings {
        max_evals: 40 * x0.len() + 100,
        grad_tol: 1e-6,
        ..settings.clone()
    };
    let polished = bounded_minimize(objective, &nm.x, &polish_settings)?;
    let (x, value) = if polished.value <= nm.value {
        (polished.x, polished.value)
    } else {
        (nm.x, nm.value)
    };
    let x = if value <= start_value { x } else { x0 };
    let params = layout.decode(&x, start);
    let (value, sigma2) = profile_from(&ev, &params)?;
    Ok((VarianceParams { sigma2, ..params }, value))
}

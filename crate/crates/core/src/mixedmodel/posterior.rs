use log::warn;
use nalgebra::DVector;

use super::context::{amp_factor, ModelContext, WarpPrior, Weights};
use super::{FittedModel, Templates, Warps};
use crate::basis::SplineBasis;
use crate::cov::SpdFactor;
use crate::data::FunctionalSample;
use crate::error::{Error, Result};
use crate::mathutil::{minimize_with_gradient, OptimizerSettings, Status};
use crate::warp::{enforce_homeomorphism, FixedWarp, RandomWarpParams, WarpConfig};

/// `‖y − f(u)‖²_{I+S}` for one curve with combined anchor values `a`,
/// where `u` is the warped time clamped to [0, 1]. If `grad` is given, the
/// derivative with respect to `a` is added to it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn curve_data_term(
    basis: &SplineBasis,
    cfg: &WarpConfig,
    factor: &SpdFactor,
    t: &[f64],
    y: &DVector<f64>,
    coef: &[f64],
    a: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n_w = cfg.n_w;
    let m = t.len();
    let want_grad = grad.is_some();
    let mut r = DVector::zeros(m);
    let mut slope = vec![0.0; m];
    let mut jac = if want_grad { vec![0.0; m * n_w] } else { Vec::new() };
    for k in 0..m {
        let u = if want_grad {
            cfg.eval_with_gradient(a, t[k], Some(&mut jac[k * n_w..(k + 1) * n_w]))
        } else {
            cfg.eval_values(a, t[k])
        };
        if !u.is_finite() {
            return Err(Error::Optimizer("non-finite warp value".into()));
        }
        let (f, df) = basis.eval_spline(coef, u.clamp(0.0, 1.0))?;
        r[k] = y[k] - f;
        slope[k] = if u > 0.0 && u < 1.0 { df } else { 0.0 };
    }
    let q = factor.whiten(&r);
    let value = q.norm_squared();
    if let Some(g) = grad {
        let s = factor.back_solve(&q);
        for k in 0..m {
            let c = -2.0 * slope[k] * s[k];
            if c != 0.0 {
                for (gi, jk) in g.iter_mut().zip(&jac[k * n_w..(k + 1) * n_w]) {
                    *gi += c * jk;
                }
            }
        }
    }
    Ok(value)
}

/// Posterior of participant `i` at packed parameters `x = (ν, w_1, …, w_J)`.
fn packed_posterior(
    ctx: &ModelContext,
    weights: &Weights,
    coef: &[f64],
    i: usize,
    x: &[f64],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n_w = ctx.spec.warp.n_w;
    let curves = &ctx.curves[i];
    if x.len() != n_w * (curves.len() + 1) {
        return Err(Error::Dimension {
            expected: n_w * (curves.len() + 1),
            got: x.len(),
        });
    }
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let nu = &x[..n_w];
    let mut a = vec![0.0; n_w];
    let mut ga = vec![0.0; n_w];
    let mut total = 0.0;
    for (j, cv) in curves.iter().enumerate() {
        let w = &x[n_w * (j + 1)..n_w * (j + 2)];
        for k in 0..n_w {
            a[k] = nu[k] + w[k];
        }
        let factor = &weights.factors[cv.grid];
        match grad.as_deref_mut() {
            Some(g) => {
                ga.iter_mut().for_each(|v| *v = 0.0);
                total += curve_data_term(&ctx.spec.basis, &ctx.spec.warp, factor, &cv.t, &cv.y, coef, &a, Some(&mut ga))?;
                for k in 0..n_w {
                    g[k] += ga[k];
                    g[n_w * (j + 1) + k] += ga[k];
                }
                total += weights.prior.eval(w, Some(&mut g[n_w * (j + 1)..n_w * (j + 2)]));
            }
            None => {
                total += curve_data_term(&ctx.spec.basis, &ctx.spec.warp, factor, &cv.t, &cv.y, coef, &a, None)?;
                total += weights.prior.eval(w, None);
            }
        }
    }
    Ok(total)
}

fn pack(fixed: &FixedWarp, random: &[RandomWarpParams]) -> Vec<f64> {
    let mut x = fixed.values.clone();
    for r in random {
        x.extend_from_slice(&r.w);
    }
    x
}

fn unpack(x: &[f64], n_w: usize, n_curves: usize) -> (FixedWarp, Vec<RandomWarpParams>) {
    let fixed = FixedWarp {
        values: x[..n_w].to_vec(),
    };
    let random = (0..n_curves)
        .map(|j| RandomWarpParams {
            w: x[n_w * (j + 1)..n_w * (j + 2)].to_vec(),
        })
        .collect();
    (fixed, random)
}

/// Negative log posterior of participant `i`'s warps (in units of `σ²`):
/// `Σ_j ‖y_ij − (θ+φ_i)∘(ν_i+v_ij)‖²_{I+S_ij} + Σ_j ‖w_ij‖²_C`.
pub fn warp_posterior(ctx: &ModelContext, weights: &Weights, templates: &Templates, warps: &Warps, i: usize) -> Result<f64> {
    let x = pack(&warps.fixed[i], &warps.random[i]);
    packed_posterior(ctx, weights, &templates.coef(i), i, &x, None)
}

/// Posterior and its gradient at packed parameters `x = (ν_i, w_i1, …, w_iJ)`.
pub fn warp_posterior_gradient(
    ctx: &ModelContext,
    weights: &Weights,
    templates: &Templates,
    i: usize,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; x.len()];
    let v = packed_posterior(ctx, weights, &templates.coef(i), i, x, Some(&mut g))?;
    Ok((v, g))
}

#[derive(Debug, Clone)]
pub struct WarpEstimate {
    pub fixed: FixedWarp,
    pub random: Vec<RandomWarpParams>,
    pub value: f64,
    pub initial_value: f64,
    pub status: Status,
}

/// Jointly minimizes participant `i`'s warp posterior over `(ν_i, w_i·)` with
/// `ν ∈ [0, 1]` and `w ∈ [−1, 1]`, then projects onto increasing warps.
/// The result never has a larger posterior than the (feasible) start.
pub fn optimize_warps(
    ctx: &ModelContext,
    weights: &Weights,
    templates: &Templates,
    i: usize,
    init_fixed: &FixedWarp,
    init_random: &[RandomWarpParams],
) -> Result<WarpEstimate> {
    let n_w = ctx.spec.warp.n_w;
    let n_curves = ctx.curves[i].len();
    let coef = templates.coef(i);
    let x0 = pack(init_fixed, init_random);
    let f0 = packed_posterior(ctx, weights, &coef, i, &x0, None)?;
    if n_w == 0 {
        return Ok(WarpEstimate {
            fixed: init_fixed.clone(),
            random: init_random.to_vec(),
            value: f0,
            initial_value: f0,
            status: Status::Converged,
        });
    }
    let mut lower = vec![0.0; n_w];
    let mut upper = vec![1.0; n_w];
    lower.extend(std::iter::repeat_n(-1.0, n_w * n_curves));
    upper.extend(std::iter::repeat_n(1.0, n_w * n_curves));
    let settings = OptimizerSettings {
        max_evals: ctx.spec.warp_max_evals,
        ..OptimizerSettings::default()
    }
    .with_bounds(lower, upper);
    let res = minimize_with_gradient(
        |x, g| packed_posterior(ctx, weights, &coef, i, x, Some(g)).unwrap_or(f64::INFINITY),
        &x0,
        &settings,
    )?;
    if res.status == Status::MaxEvaluations {
        warn!("warp optimization for participant {i} stopped at the evaluation limit");
    }
    let (fixed, random) = unpack(&res.x, n_w, n_curves);
    let (fixed, random, value) = project(ctx, weights, &coef, i, fixed, random, res.value)?;
    if value > f0 {
        return Ok(WarpEstimate {
            fixed: init_fixed.clone(),
            random: init_random.to_vec(),
            value: f0,
            initial_value: f0,
            status: res.status,
        });
    }
    Ok(WarpEstimate {
        fixed,
        random,
        value,
        initial_value: f0,
        status: res.status,
    })
}

fn project(
    ctx: &ModelContext,
    weights: &Weights,
    coef: &[f64],
    i: usize,
    fixed: FixedWarp,
    random: Vec<RandomWarpParams>,
    value: f64,
) -> Result<(FixedWarp, Vec<RandomWarpParams>, f64)> {
    let cfg = &ctx.spec.warp;
    let mut changed = false;
    let mut new_fixed = fixed.clone();
    let mut new_random = Vec::with_capacity(random.len());
    for r in &random {
        let h = enforce_homeomorphism(cfg, &fixed, Some(r));
        changed |= h.adjusted;
        new_fixed = h.fixed;
        new_random.push(h.rand);
    }
    if !changed {
        return Ok((fixed, random, value));
    }
    let x = pack(&new_fixed, &new_random);
    let v = packed_posterior(ctx, weights, coef, i, &x, None)?;
    Ok((new_fixed, new_random, v))
}

/// Predicted random warp of a new curve against participant `i`'s fitted
/// template and fixed warp, with the minimized single-curve posterior.
pub fn predict_warp(model: &FittedModel, i: usize, times: &[f64], values: &[f64]) -> Result<(RandomWarpParams, f64)> {
    if i >= model.templates.d.len() {
        return Err(Error::Parameter(format!("participant index {i} out of range")));
    }
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::Validation("sample needs at least 2 paired observations".into()));
    }
    if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Validation("sample times must lie in [0, 1]".into()));
    }
    let spec = &model.spec;
    let cfg = &spec.warp;
    let params = &model.params;
    let factor = amp_factor(&params.amp_kernel()?, times)?;
    let prior = WarpPrior::new(&spec.warp_kernel.with_scale(params.gamma2), &cfg.anchors())?;
    let coef = model.templates.coef(i);
    let nu = &model.warps.fixed[i];
    let y = DVector::from_column_slice(values);
    let objective = |w: &[f64], grad: Option<&mut [f64]>| -> Result<f64> {
        let a: Vec<f64> = nu.values.iter().zip(w).map(|(n, w)| n + w).collect();
        match grad {
            Some(g) => {
                g.iter_mut().for_each(|v| *v = 0.0);
                let v = curve_data_term(&spec.basis, cfg, &factor, times, &y, &coef, &a, Some(g))?;
                Ok(v + prior.eval(w, Some(g)))
            }
            None => Ok(curve_data_term(&spec.basis, cfg, &factor, times, &y, &coef, &a, None)? + prior.eval(w, None)),
        }
    };
    let zero = vec![0.0; cfg.n_w];
    let f0 = objective(&zero, None)?;
    if cfg.n_w == 0 {
        return Ok((RandomWarpParams::zero(0), f0));
    }
    let settings = OptimizerSettings {
        max_evals: spec.warp_max_evals,
        ..OptimizerSettings::default()
    }
    .with_bounds(vec![-1.0; cfg.n_w], vec![1.0; cfg.n_w]);
    let res = minimize_with_gradient(|w, g| objective(w, Some(g)).unwrap_or(f64::INFINITY), &zero, &settings)?;
    let h = enforce_homeomorphism(cfg, nu, Some(&RandomWarpParams { w: res.x.clone() }));
    let (w, v) = if h.adjusted {
        let v = objective(&h.rand.w, None)?;
        (h.rand.w, v)
    } else {
        (res.x, res.value)
    };
    if v > f0 {
        return Ok((RandomWarpParams::zero(cfg.n_w), f0));
    }
    Ok((RandomWarpParams { w }, v))
}

/// Minimized single-curve negative log posterior of `sample` under
/// participant `i`'s fitted model; smaller means a better match.
pub fn posterior_distance(model: &FittedModel, i: usize, sample: &FunctionalSample) -> Result<f64> {
    Ok(predict_warp(model, i, &sample.times, &sample.values)?.1)
}

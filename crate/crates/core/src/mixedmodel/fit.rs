use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::context::ModelContext;
use super::laplace::{estimate_variance, linearize};
use super::posterior::{optimize_warps, warp_posterior};
use super::templates::estimate_templates;
use super::{ModelSpec, Templates, VarianceParams, Warps};
use crate::data::{ConditionDataset, Normalization};
use crate::error::{Error, Result};
use crate::warp::eval_warp;

/// One pass of warp prediction followed by template re-estimation; the
/// posterior is summed over participants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerStep {
    pub outer: usize,
    pub inner: usize,
    pub posterior_before: f64,
    pub posterior_after_warps: f64,
    pub posterior_after_templates: f64,
    pub max_warp_change: f64,
}

/// One variance re-estimation. `accepted` is false if the step raised the
/// likelihood criterion above the previous accepted one and was undone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub outer: usize,
    pub nll_at_start: f64,
    pub nll: f64,
    pub params: VarianceParams,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub inner: Vec<InnerStep>,
    pub outer: Vec<OuterStep>,
}

impl FitTrace {
    /// Criterion values of the accepted outer iterations.
    pub fn accepted_nll(&self) -> Vec<f64> {
        self.outer.iter().filter(|s| s.accepted).map(|s| s.nll).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: String,
    pub spec: ModelSpec,
    pub participants: Vec<String>,
    pub repetitions: Vec<Vec<u32>>,
    pub conditions: Vec<String>,
    pub normalization: Option<Normalization>,
    pub templates: Templates,
    pub warps: Warps,
    pub params: VarianceParams,
    /// Profile Laplace criterion (`−2 log L` without `m log 2π`).
    pub nll: f64,
    pub trace: FitTrace,
}

impl FittedModel {
    pub fn participant_index(&self, id: &str) -> Option<usize> {
        self.participants.iter().position(|p| p == id)
    }

    /// Shared template `θ` at `t`.
    pub fn template(&self, t: &[f64]) -> Result<Vec<f64>> {
        t.iter()
            .map(|&x| Ok(self.spec.basis.eval_spline(&self.templates.c, x)?.0))
            .collect()
    }

    /// Participant template in observed time, `(θ + φ_i)∘ν_i`, at `t`.
    pub fn participant_curve(&self, i: usize, t: &[f64]) -> Result<Vec<f64>> {
        let coef = self.templates.coef(i);
        let u = eval_warp(&self.spec.warp, &self.warps.fixed[i], None, t)?;
        u.iter()
            .map(|&x| Ok(self.spec.basis.eval_spline(&coef, x.clamp(0.0, 1.0))?.0))
            .collect()
    }

    /// Fitted mean of curve `(i, j)`: `(θ + φ_i)∘(ν_i + v_ij)` at `t`.
    pub fn curve_mean(&self, i: usize, j: usize, t: &[f64]) -> Result<Vec<f64>> {
        let coef = self.templates.coef(i);
        let u = eval_warp(&self.spec.warp, &self.warps.fixed[i], Some(&self.warps.random[i][j]), t)?;
        u.iter()
            .map(|&x| Ok(self.spec.basis.eval_spline(&coef, x.clamp(0.0, 1.0))?.0))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn total_posterior(ctx: &ModelContext, weights: &super::Weights, templates: &Templates, warps: &Warps) -> Result<f64> {
    (0..ctx.n_participants())
        .map(|i| warp_posterior(ctx, weights, templates, warps, i))
        .sum()
}

struct State {
    templates: Templates,
    warps: Warps,
    params: VarianceParams,
    nll: f64,
}

/// Maximum likelihood fit.
///
/// Starting from identity warps and GLS templates, each outer iteration
/// alternates up to `j_max` rounds of warp prediction (per participant, in
/// parallel) and template estimation, stopping early once the warps settle,
/// and then re-estimates the variance parameters on the linearized model.
/// An outer iteration that increases the likelihood criterion relative to
/// the previous one is undone and ends the fit.
pub fn fit(data: &ConditionDataset, spec: &ModelSpec) -> Result<FittedModel> {
    let ctx = ModelContext::new(data, spec)?;
    let (templates, warps, params, nll, trace) = fit_context(&ctx)?;
    Ok(FittedModel {
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        participants: data.participants.iter().map(|p| p.participant.clone()).collect(),
        repetitions: data
            .participants
            .iter()
            .map(|p| p.samples.iter().map(|s| s.repetition).collect())
            .collect(),
        conditions: data.conditions(),
        normalization: Some(data.normalization),
        templates,
        warps,
        params,
        nll,
        trace,
    })
}

type FitOutput = (Templates, Warps, VarianceParams, f64, FitTrace);

pub(crate) fn fit_context(ctx: &ModelContext) -> Result<FitOutput> {
    let spec = ctx.spec;
    let mut params = spec.initial_params();
    let mut warps = Warps::identity(&spec.warp, &ctx.curves_per_participant());
    let weights = ctx.weights(&params)?;
    let mut templates = estimate_templates(ctx, &weights, &warps, params.eta(spec.lambda))
        .map_err(|e| e.context("initial template estimate"))?;
    let mut trace = FitTrace::default();
    let mut previous: Option<State> = None;

    for outer in 0..spec.i_max {
        let weights = ctx.weights(&params)?;
        let eta = params.eta(spec.lambda);
        for inner in 0..spec.j_max {
            let before = total_posterior(ctx, &weights, &templates, &warps)?;
            let estimates: Vec<Result<_>> = (0..ctx.n_participants())
                .into_par_iter()
                .map(|i| {
                    optimize_warps(ctx, &weights, &templates, i, &warps.fixed[i], &warps.random[i])
                        .map_err(|e| e.context(format!("warp estimation for participant {i}")))
                })
                .collect();
            let mut new_warps = warps.clone();
            let mut after_warps = 0.0;
            for (i, est) in estimates.into_iter().enumerate() {
                let est = est?;
                after_warps += est.value;
                new_warps.fixed[i] = est.fixed;
                new_warps.random[i] = est.random;
            }
            let change = new_warps.max_abs_diff(&warps);
            warps = new_warps;
            templates = estimate_templates(ctx, &weights, &warps, eta)?;
            let after_templates = total_posterior(ctx, &weights, &templates, &warps)?;
            debug!(
                "outer {outer} inner {inner}: posterior {before:.6e} -> {after_warps:.6e} -> {after_templates:.6e}, change {change:.2e}"
            );
            trace.inner.push(InnerStep {
                outer,
                inner,
                posterior_before: before,
                posterior_after_warps: after_warps,
                posterior_after_templates: after_templates,
                max_warp_change: change,
            });
            if change < spec.inner_tol {
                break;
            }
        }

        let sys = linearize(ctx, &templates, &warps)?;
        let start = super::laplace::profile_nll(ctx, &sys, &params)
            .map(|(v, _)| v)
            .unwrap_or(f64::INFINITY);
        let (new_params, nll) =
            estimate_variance(ctx, &sys, &params).map_err(|e| e.context(format!("variance estimation, outer iteration {outer}")))?;
        info!(
            "outer {outer}: criterion {nll:.6}, sigma2 {:.4e} gamma2 {:.4e} tau2 {:.4e} alpha {:.4e} mu {:.3}",
            new_params.sigma2, new_params.gamma2, new_params.tau2, new_params.alpha, new_params.mu
        );
        let worse = previous.as_ref().is_some_and(|p| nll > p.nll + 1e-6);
        trace.outer.push(OuterStep {
            outer,
            nll_at_start: start,
            nll,
            params: new_params,
            accepted: !worse,
        });
        if worse {
            let p = previous.take().expect("previous state exists");
            info!("outer {outer}: criterion increased, keeping the previous iterate");
            return Ok((p.templates, p.warps, p.params, p.nll, trace));
        }
        params = new_params;
        previous = Some(State {
            templates: templates.clone(),
            warps: warps.clone(),
            params,
            nll,
        });
    }
    let p = previous.ok_or_else(|| Error::Optimizer("no outer iteration completed".into()))?;
    Ok((p.templates, p.warps, p.params, p.nll, trace))
}

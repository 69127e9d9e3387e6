use nalgebra::{Cholesky, DMatrix, DVector};

use super::context::{ModelContext, Weights};
use super::{Templates, Warps};
use crate::error::{Error, Result};
use crate::warp::combined_values;

/// Per-participant GLS normal equations `(Σ_j Φ'A⁻¹Φ, Σ_j Φ'A⁻¹y)` with `A = I + S`
/// and `Φ` evaluated at the warped times.
pub(crate) fn normal_equations(
    ctx: &ModelContext,
    weights: &Weights,
    warps: &Warps,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let basis = &ctx.spec.basis;
    let cfg = &ctx.spec.warp;
    let k = basis.n_basis();
    ctx.curves
        .iter()
        .enumerate()
        .map(|(i, curves)| {
            let mut m = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for (j, cv) in curves.iter().enumerate() {
                let a = combined_values(&warps.fixed[i], Some(&warps.random[i][j]));
                let u: Vec<f64> = cv.t.iter().map(|&t| cfg.eval_values(&a, t).clamp(0.0, 1.0)).collect();
                let phi = basis.design_matrix(&u)?;
                let f = &weights.factors[cv.grid];
                let wphi = f.whiten_mat(&phi);
                let wy = f.whiten(&cv.y);
                m += wphi.transpose() * &wphi;
                b += wphi.transpose() * wy;
            }
            Ok((m, b))
        })
        .collect()
}

pub(crate) fn solve_theta(eqs: &[(DMatrix<f64>, DVector<f64>)]) -> Result<DVector<f64>> {
    let k = eqs[0].1.len();
    let mut m = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (mi, bi) in eqs {
        m += mi;
        b += bi;
    }
    let sv = m.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        return Err(Error::Conditioning(format!(
            "template normal equations are rank deficient (singular values {smin:.2e} / {smax:.2e}); \
             use fewer basis functions"
        )));
    }
    match Cholesky::new(m.clone()) {
        Some(ch) => Ok(ch.solve(&b)),
        None => Ok(m.lu().solve(&b).ok_or_else(|| Error::Conditioning("singular template system".into()))?),
    }
}

/// Ridge-GLS individual deviations, centered; returns the updated `c`.
pub(crate) fn solve_phi(
    eqs: &[(DMatrix<f64>, DVector<f64>)],
    c: &DVector<f64>,
    eta: f64,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let k = c.len();
    let mut d: Vec<DVector<f64>> = eqs
        .iter()
        .map(|(mi, bi)| {
            let lhs = mi + DMatrix::identity(k, k) * eta;
            let rhs = bi - mi * c;
            match Cholesky::new(lhs.clone()) {
                Some(ch) => ch.solve(&rhs),
                None => {
                    // Individual templates are unidentified where a participant has
                    // no data; take the minimum-norm solution.
                    let svd = lhs.svd(true, true);
                    let tol = 1e-12 * svd.singular_values.max();
                    svd.solve(&rhs, tol).unwrap_or_else(|_| DVector::zeros(k))
                }
            }
        })
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().fold(DVector::zeros(k), |acc, v| acc + v) / n;
    for v in &mut d {
        *v -= &mean;
    }
    (c + mean, d)
}

/// GLS estimate of the shared template coefficients at fixed warps.
pub fn estimate_theta(ctx: &ModelContext, weights: &Weights, warps: &Warps) -> Result<Vec<f64>> {
    let eqs = normal_equations(ctx, weights, warps)?;
    Ok(solve_theta(&eqs)?.iter().cloned().collect())
}

/// Penalized GLS estimates of the individual templates given `c`, with
/// penalty `η`. The deviations are centered and their mean moved into `c`.
pub fn estimate_phi(ctx: &ModelContext, weights: &Weights, warps: &Warps, c: &[f64], eta: f64) -> Result<Templates> {
    if c.len() != ctx.spec.basis.n_basis() {
        return Err(Error::Dimension {
            expected: ctx.spec.basis.n_basis(),
            got: c.len(),
        });
    }
    let eqs = normal_equations(ctx, weights, warps)?;
    let (c, d) = solve_phi(&eqs, &DVector::from_column_slice(c), eta);
    Ok(Templates::from_vectors(&c, &d))
}

/// Both template stages at once (shared GLS, then individual ridge-GLS).
pub(crate) fn estimate_templates(ctx: &ModelContext, weights: &Weights, warps: &Warps, eta: f64) -> Result<Templates> {
    let eqs = normal_equations(ctx, weights, warps)?;
    let c = solve_theta(&eqs)?;
    let (c, d) = solve_phi(&eqs, &c, eta);
    Ok(Templates::from_vectors(&c, &d))
}

//! Sampling paths from a factor model.

use super::{FactorData, FactorDesign, PathObservation, N_LEVELS};
use crate::cov::SpdFactor;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Parameters of a factor model to sample from.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTruth {
    pub theta: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub psi: [DMatrix<f64>; N_LEVELS],
    pub lambda: DVector<f64>,
    pub design: FactorDesign,
}

fn normal_draw<R: Rng>(rng: &mut R, chol: Option<&DMatrix<f64>>, q: usize) -> DVector<f64> {
    match chol {
        Some(l) => l * DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal)),
        None => DVector::zeros(q),
    }
}

fn factor_of(psi: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if psi.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    Ok(Some(SpdFactor::new(psi.clone())?.lower()))
}

/// Draws `n_rep` paths per participant and height level. Participants are
/// named `p01`, `p02`, …; draws follow the order participant, height, curve.
pub fn simulate_factor_data<R: Rng>(truth: &FactorTruth, n_participants: usize, n_rep: usize, rng: &mut R) -> Result<FactorData> {
    let (t, d) = truth.theta.shape();
    let q = truth.w.ncols();
    if truth.w.nrows() != t * d || truth.lambda.len() != d {
        return Err(Error::Dimension {
            expected: t * d,
            got: truth.w.nrows(),
        });
    }
    let chol: Vec<Option<DMatrix<f64>>> = truth.psi.iter().map(factor_of).collect::<Result<_>>()?;
    let sd: Vec<f64> = truth.lambda.iter().map(|l| l.sqrt()).collect();
    let mut obs = Vec::with_capacity(n_participants * truth.design.n_heights() * n_rep);
    for i in 0..n_participants {
        let z1 = normal_draw(rng, chol[0].as_ref(), q);
        for h in 0..truth.design.n_heights() {
            let z2 = normal_draw(rng, chol[1].as_ref(), q);
            let fixed = truth.beta.transpose() * truth.design.row(h)?;
            for j in 0..n_rep {
                let z3 = normal_draw(rng, chol[2].as_ref(), q);
                let u = &fixed + &z1 + &z2 + z3;
                let dev = &truth.w * u;
                let path = DMatrix::from_fn(t, d, |r, c| {
                    truth.theta[(r, c)] + dev[c * t + r] + sd[c] * rng.sample::<f64, _>(StandardNormal)
                });
                obs.push(PathObservation {
                    participant: format!("p{:02}", i + 1),
                    repetition: j as u32 + 1,
                    height: h,
                    path,
                });
            }
        }
    }
    FactorData::new(obs)
}

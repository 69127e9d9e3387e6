use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{ModelSpec, VarianceParams};
use crate::cov::{build_cov, Kernel, SpdFactor, WarpKernel};
use crate::data::ConditionDataset;
use crate::error::{Error, Result};

pub(crate) struct Curve {
    pub t: Vec<f64>,
    pub y: DVector<f64>,
    /// Index into the distinct observation grids.
    pub grid: usize,
}

/// Data and specification arranged for estimation.
///
/// Curves sharing an identical time grid share one amplitude covariance
/// factorization.
pub struct ModelContext<'a> {
    pub spec: &'a ModelSpec,
    pub(crate) curves: Vec<Vec<Curve>>,
    pub(crate) grids: Vec<Vec<f64>>,
    m: usize,
}

impl<'a> ModelContext<'a> {
    pub fn new(data: &ConditionDataset, spec: &'a ModelSpec) -> Result<Self> {
        let groups: Vec<Vec<(Vec<f64>, Vec<f64>)>> = data
            .participants
            .iter()
            .map(|p| p.samples.iter().map(|s| (s.times.clone(), s.values.clone())).collect())
            .collect();
        Self::from_curves(groups, spec)
    }

    /// Builds a context from `(times, values)` pairs grouped by participant.
    pub fn from_curves(groups: Vec<Vec<(Vec<f64>, Vec<f64>)>>, spec: &'a ModelSpec) -> Result<Self> {
        spec.validate()?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::InsufficientData("every participant needs at least one curve".into()));
        }
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut grids = Vec::new();
        let mut m = 0;
        let mut curves = Vec::with_capacity(groups.len());
        for (i, g) in groups.into_iter().enumerate() {
            let mut pc = Vec::with_capacity(g.len());
            for (j, (t, y)) in g.into_iter().enumerate() {
                if t.len() != y.len() || t.len() < 2 {
                    return Err(Error::Validation(format!(
                        "participant {i} curve {j}: need at least 2 paired observations"
                    )));
                }
                if t.iter().any(|&x| !(0.0..=1.0).contains(&x)) || y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "participant {i} curve {j}: times must lie in [0, 1] and values be finite"
                    )));
                }
                let key: Vec<u64> = t.iter().map(|x| x.to_bits()).collect();
                let grid = *index.entry(key).or_insert_with(|| {
                    grids.push(t.clone());
                    grids.len() - 1
                });
                m += t.len();
                pc.push(Curve {
                    t,
                    y: DVector::from_vec(y),
                    grid,
                });
            }
            curves.push(pc);
        }
        Ok(Self { spec, curves, grids, m })
    }

    pub fn n_participants(&self) -> usize {
        self.curves.len()
    }

    pub fn curves_per_participant(&self) -> Vec<usize> {
        self.curves.iter().map(|c| c.len()).collect()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Factorizations of `I + S` for every distinct grid.
    pub fn weights(&self, params: &VarianceParams) -> Result<Weights> {
        let kernel = params.amp_kernel()?;
        let factors = self
            .grids
            .iter()
            .map(|t| amp_factor(&kernel, t))
            .collect::<Result<Vec<_>>>()?;
        let prior = WarpPrior::new(&self.spec.warp_kernel.with_scale(params.gamma2), &self.spec.warp.anchors())?;
        Ok(Weights { factors, prior })
    }
}

pub(crate) fn amp_factor<K: Kernel>(kernel: &K, t: &[f64]) -> Result<SpdFactor> {
    let mut a = build_cov(kernel, t);
    for k in 0..t.len() {
        a[(k, k)] += 1.0;
    }
    SpdFactor::new(a)
}

/// Precision of the warp prior at the anchors.
#[derive(Debug, Clone)]
pub(crate) struct WarpPrior {
    pub precision: DMatrix<f64>,
}

impl WarpPrior {
    pub fn new(kernel: &WarpKernel, anchors: &[f64]) -> Result<Self> {
        if anchors.is_empty() {
            return Ok(Self {
                precision: DMatrix::zeros(0, 0),
            });
        }
        let c = build_cov(kernel, anchors);
        Ok(Self {
            precision: SpdFactor::new(c)?.inverse(),
        })
    }

    /// `w' C^{-1} w`, adding `2 C^{-1} w` to `grad` if given.
    pub fn eval(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = w.len();
        let mut total = 0.0;
        let mut cw = vec![0.0; n];
        for r in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += self.precision[(r, k)] * w[k];
            }
            cw[r] = acc;
            total += w[r] * acc;
        }
        if let Some(g) = grad {
            for r in 0..n {
                g[r] += 2.0 * cw[r];
            }
        }
        total
    }
}

/// Per-grid factorizations of `I + S` and the warp prior for one set of
/// variance parameters.
pub struct Weights {
    pub(crate) factors: Vec<SpdFactor>,
    pub(crate) prior: WarpPrior,
}

//! Clamped B-spline bases on [0, 1] and their time derivatives.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A clamped B-spline basis on [0, 1].
///
/// `n_basis()` counts basis functions. With `intercept = true` the basis
/// has `interior_knots.len() + degree + 1` functions and forms a partition
/// of unity; without it the first function is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct SplineBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    intercept: bool,
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    degree: usize,
    interior_knots: Vec<f64>,
    intercept: bool,
}

impl TryFrom<BasisRepr> for SplineBasis {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        SplineBasis::new(r.degree, r.interior_knots, r.intercept)
    }
}

impl From<SplineBasis> for BasisRepr {
    fn from(b: SplineBasis) -> Self {
        BasisRepr {
            degree: b.degree,
            interior_knots: b.interior_knots,
            intercept: b.intercept,
        }
    }
}

impl SplineBasis {
    pub fn new(degree: usize, interior_knots: Vec<f64>, intercept: bool) -> Result<Self> {
        if interior_knots
            .windows(2)
            .any(|w| !(w[0] < w[1]))
        {
            return Err(Error::Parameter("interior knots must be strictly increasing".into()));
        }
        if interior_knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return Err(Error::Parameter("interior knots must lie inside (0, 1)".into()));
        }
        if !intercept && interior_knots.len() + degree == 0 {
            return Err(Error::Parameter("basis without intercept would be empty".into()));
        }
        let mut basis = Self {
            degree,
            interior_knots,
            intercept,
            knots: Vec::new(),
        };
        basis.rebuild_knots();
        Ok(basis)
    }

    /// Cubic (or other degree) basis with `n_basis` functions, intercept
    /// included, and equidistant interior knots.
    pub fn equidistant(n_basis: usize, degree: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::Parameter(format!(
                "a degree-{degree} basis needs at least {} functions, got {n_basis}",
                degree + 1
            )));
        }
        let n_interior = n_basis - degree - 1;
        let knots = (1..=n_interior)
            .map(|k| k as f64 / (n_interior + 1) as f64)
            .collect();
        Self::new(degree, knots, true)
    }

    fn rebuild_knots(&mut self) {
        let p = self.degree;
        let mut knots = vec![0.0; p + 1];
        knots.extend_from_slice(&self.interior_knots);
        knots.extend(std::iter::repeat(1.0).take(p + 1));
        self.knots = knots;
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    /// Full knot vector including the repeated boundary knots.
    pub fn knot_vector(&self) -> Vec<f64> {
        self.knots.clone()
    }

    fn n_full(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    pub fn n_basis(&self) -> usize {
        self.n_full() - usize::from(!self.intercept)
    }

    /// Greville abscissae of the basis functions (intercept included).
    pub fn greville(&self) -> Vec<f64> {
        let u = &self.knots;
        let p = self.degree;
        let all: Vec<f64> = (0..self.n_full())
            .map(|i| {
                if p == 0 {
                    0.5 * (u[i] + u[i + 1])
                } else {
                    u[i + 1..=i + p].iter().sum::<f64>() / p as f64
                }
            })
            .collect();
        if self.intercept {
            all
        } else {
            all[1..].to_vec()
        }
    }

    fn find_span(u: &[f64], n_full: usize, p: usize, t: f64) -> usize {
        let last = n_full - 1;
        if t >= u[last + 1] {
            return last;
        }
        if t <= u[p] {
            return p;
        }
        let (mut lo, mut hi) = (p, last + 1);
        let mut mid = (lo + hi) / 2;
        while t < u[mid] || t >= u[mid + 1] {
            if t < u[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Nonzero degree-`p` basis values at `t` on knot span `span`
    /// (functions `span - p ..= span`), by the triangular de Boor scheme.
    fn basis_funs(u: &[f64], span: usize, p: usize, t: f64, out: &mut [f64]) {
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    fn check_time(t: f64) -> Result<f64> {
        if !(t >= -1e-12 && t <= 1.0 + 1e-12) {
            return Err(Error::Domain {
                value: t,
                domain: "[0, 1]",
            });
        }
        Ok(t.clamp(0.0, 1.0))
    }

    /// Values and first derivatives of the nonzero basis functions at `t`.
    ///
    /// Returns the index of the first nonzero function (in the exposed,
    /// possibly intercept-free, numbering) and writes `degree + 1` entries
    /// into `values` and `derivs`. Entries that fall on a dropped intercept
    /// column are zeroed.
    pub fn eval_local(&self, t: f64, values: &mut [f64], derivs: &mut [f64]) -> Result<isize> {
        let t = Self::check_time(t)?;
        let u = &self.knots;
        let p = self.degree;
        assert!(p < 15, "spline degree too large");
        let n_full = self.n_full();
        let span = Self::find_span(u, n_full, p, t);
        Self::basis_funs(u, span, p, t, &mut values[..=p]);
        if p == 0 {
            derivs[0] = 0.0;
        } else {
            let mut lower = [0.0f64; 16];
            Self::basis_funs(u, span, p - 1, t, &mut lower[..p]);
            let pf = p as f64;
            for k in 0..=p {
                let i = span - p + k;
                // N_{i,p-1} is lower[k-1]; N_{i+1,p-1} is lower[k].
                let a = if k >= 1 {
                    let den = u[i + p] - u[i];
                    if den > 0.0 {
                        lower[k - 1] / den
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                let b = if k < p {
                    let den = u[i + p + 1] - u[i + 1];
                    if den > 0.0 {
                        lower[k] / den
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                derivs[k] = pf * (a - b);
            }
        }
        let first = span as isize - p as isize - isize::from(!self.intercept);
        if first < 0 {
            values[0] = 0.0;
            derivs[0] = 0.0;
        }
        Ok(first)
    }

    fn fill(&self, times: &[f64], derivative: bool) -> Result<DMatrix<f64>> {
        let k = self.n_basis();
        let p = self.degree;
        let mut m = DMatrix::zeros(times.len(), k);
        let mut vals = vec![0.0; p + 1];
        let mut ders = vec![0.0; p + 1];
        for (r, &t) in times.iter().enumerate() {
            let first = self.eval_local(t, &mut vals, &mut ders)?;
            let src = if derivative { &ders } else { &vals };
            for (j, &v) in src.iter().enumerate() {
                let col = first + j as isize;
                if col >= 0 && (col as usize) < k {
                    m[(r, col as usize)] = v;
                }
            }
        }
        Ok(m)
    }

    /// Basis functions evaluated at `times` (rows) via de Boor recursion.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        self.fill(times, false)
    }

    /// Analytic time derivatives of the basis functions at `times`.
    pub fn derivative_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        self.fill(times, true)
    }

    /// Value and derivative of the spline with coefficients `coef` at `t`.
    pub fn eval_spline(&self, coef: &[f64], t: f64) -> Result<(f64, f64)> {
        let p = self.degree;
        let mut vals = [0.0f64; 16];
        let mut ders = [0.0f64; 16];
        let first = self.eval_local(t, &mut vals[..=p], &mut ders[..=p])?;
        // Basis derivatives sum to zero, so offsetting by one coefficient
        // leaves the derivative unchanged and makes it exactly zero for
        // locally constant splines.
        let complete = first >= 0 && first as usize + p < coef.len();
        let offset = if complete { coef[first as usize] } else { 0.0 };
        let (mut f, mut df) = (0.0, 0.0);
        for j in 0..=p {
            let col = first + j as isize;
            if col >= 0 && (col as usize) < coef.len() {
                f += vals[j] * coef[col as usize];
                df += ders[j] * (coef[col as usize] - offset);
            }
        }
        Ok((f, df))
    }
}

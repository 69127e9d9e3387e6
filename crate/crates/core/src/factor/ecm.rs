//! Exact likelihood, ECM sweeps and SQUAREM acceleration for the factor model.
//!
//! Conditional on the parameters, each curve is summarized by a pseudo
//! observation `ŷ_c = M⁻¹WᵀD⁻¹r_c` of its total latent weight with noise
//! covariance `M⁻¹`, `M = WᵀD⁻¹W`. The nested random effects then form a
//! Gaussian tree per participant, which is integrated exactly by passing
//! messages upwards and smoothed by conditioning downwards.

use super::{FactorData, FactorDesign, FactorModel, N_LEVELS};
use crate::cov::SpdFactor;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcmSettings {
    pub max_sweeps: usize,
    /// Stop when the relative log-likelihood change falls below this.
    pub rel_tol: f64,
    pub accelerate: bool,
}

impl Default for EcmSettings {
    fn default() -> Self {
        Self {
            max_sweeps: 5000,
            rel_tol: 1e-9,
            accelerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    w: DMatrix<f64>,
    beta: DMatrix<f64>,
    psi: [DMatrix<f64>; N_LEVELS],
    lambda: DVector<f64>,
}

struct Group {
    curves: Vec<usize>,
}

struct Prepared {
    n_time: usize,
    n_coord: usize,
    q: usize,
    /// Vectorized deviations from the reference path.
    r: Vec<DVector<f64>>,
    x: Vec<DVector<f64>>,
    participants: Vec<Vec<Group>>,
    n_groups: usize,
    xtx: DMatrix<f64>,
}

impl Prepared {
    fn new(data: &FactorData, theta: &DMatrix<f64>, design: &FactorDesign, q: usize) -> Result<Self> {
        let theta_v = DVector::from_column_slice(theta.as_slice());
        let mut index: BTreeMap<&str, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        let mut r = Vec::with_capacity(data.len());
        let mut x = Vec::with_capacity(data.len());
        for (c, o) in data.observations.iter().enumerate() {
            r.push(DVector::from_column_slice(o.path.as_slice()) - &theta_v);
            x.push(design.row(o.height)?);
            if !index.contains_key(o.participant.as_str()) {
                order.push(&o.participant);
            }
            index.entry(&o.participant).or_default().entry(o.height).or_default().push(c);
        }
        let mut participants = Vec::new();
        let mut n_groups = 0;
        for p in order {
            let groups: Vec<Group> = index[p]
                .values()
                .map(|curves| Group { curves: curves.clone() })
                .collect();
            n_groups += groups.len();
            participants.push(groups);
        }
        let p = design.n_cols();
        let xtx = x.iter().fold(DMatrix::zeros(p, p), |a, v| a + v * v.transpose());
        Ok(Self {
            n_time: data.n_time(),
            n_coord: data.n_coord(),
            q,
            r,
            x,
            participants,
            n_groups,
            xtx,
        })
    }

    fn dim(&self) -> usize {
        self.n_time * self.n_coord
    }

    fn level_counts(&self) -> [usize; N_LEVELS] {
        [self.participants.len(), self.n_groups, self.r.len()]
    }

    fn noise_diag(&self, lambda: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| lambda[i / self.n_time])
    }
}

/// Sufficient statistics of the latent posterior.
struct Moments {
    loglik: f64,
    /// Posterior mean and covariance of each curve's summed random weight.
    es: Vec<DVector<f64>>,
    cs: Vec<DMatrix<f64>>,
    /// `Σ E[z zᵀ]` per level.
    szz: [DMatrix<f64>; N_LEVELS],
}

fn gauss_logpdf(x: &DVector<f64>, f: &SpdFactor) -> f64 {
    let q = x.len() as f64;
    -0.5 * (q * (2.0 * PI).ln() + f.logdet() + x.dot(&f.solve(x)))
}

fn sym(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn e_step(prep: &Prepared, par: &Params) -> Result<Moments> {
    let q = prep.q;
    let dim = prep.dim();
    let dinv = prep.noise_diag(&par.lambda).map(|v| 1.0 / v);
    let wd = DMatrix::from_fn(dim, q, |i, k| par.w[(i, k)] * dinv[i]);
    let m = par.w.transpose() * &wd;
    let mf = SpdFactor::new(sym(m))?;
    let e = sym(mf.inverse());
    let logdet_d: f64 = -dinv.iter().map(|v| v.ln()).sum::<f64>();
    let ln2pi = (2.0 * PI).ln();

    let s3 = sym(&par.psi[2] + &e);
    let s3f = SpdFactor::new(s3.clone())?;
    let k3 = s3f.solve_mat(&par.psi[2]).transpose();
    let v3 = sym(&par.psi[2] - &k3 * &par.psi[2]);
    let i_q = DMatrix::<f64>::identity(q, q);

    let n = prep.r.len();
    let mut es = vec![DVector::zeros(q); n];
    let mut cs = vec![DMatrix::zeros(q, q); n];
    let mut szz = [DMatrix::zeros(q, q), DMatrix::zeros(q, q), DMatrix::zeros(q, q)];
    let mut loglik = 0.0;

    // Pseudo observations with the fixed effect removed.
    let mut a = Vec::with_capacity(n);
    for c in 0..n {
        let r = &prep.r[c];
        let b = wd.transpose() * r;
        let yhat = &e * &b;
        let rdr: f64 = r.iter().zip(dinv.iter()).map(|(v, d)| v * v * d).sum();
        loglik += -0.5 * ((dim - q) as f64 * ln2pi + logdet_d + mf.logdet() + rdr - b.dot(&yhat));
        a.push(yhat - par.beta.transpose() * &prep.x[c]);
    }

    for groups in &prep.participants {
        let mut abar = Vec::with_capacity(groups.len());
        let mut tf = Vec::with_capacity(groups.len());
        let mut p1 = DMatrix::zeros(q, q);
        let mut info = DVector::zeros(q);
        for g in groups {
            let nc = g.curves.len() as f64;
            let mean = g.curves.iter().fold(DVector::zeros(q), |s, &c| s + &a[c]) / nc;
            for &c in &g.curves {
                loglik += gauss_logpdf(&(&a[c] - &mean), &s3f);
            }
            loglik += 0.5 * (q as f64 * ln2pi + s3f.logdet() - q as f64 * nc.ln());
            let t = SpdFactor::new(sym(&par.psi[1] + &s3 / nc))?;
            p1 += t.inverse();
            info += t.solve(&mean);
            abar.push(mean);
            tf.push(t);
        }
        let p1f = SpdFactor::new(sym(p1))?;
        let zbar = p1f.solve(&info);
        let p1inv = sym(p1f.inverse());
        for (mean, t) in abar.iter().zip(&tf) {
            loglik += gauss_logpdf(&(mean - &zbar), t);
        }
        loglik += 0.5 * (q as f64 * ln2pi - p1f.logdet());
        let gf = SpdFactor::new(sym(&par.psi[0] + &p1inv))?;
        loglik += gauss_logpdf(&zbar, &gf);

        let k1 = gf.solve_mat(&par.psi[0]).transpose();
        let mu1 = &k1 * &zbar;
        let c1 = sym(&par.psi[0] - &k1 * &par.psi[0]);
        szz[0] += &mu1 * mu1.transpose() + &c1;

        for ((g, mean), t) in groups.iter().zip(&abar).zip(&tf) {
            let k2 = t.solve_mat(&par.psi[1]).transpose();
            let v2 = sym(&par.psi[1] - &k2 * &par.psi[1]);
            let ez2 = &k2 * (mean - &mu1);
            let cz2 = sym(&v2 + &k2 * &c1 * k2.transpose());
            szz[1] += &ez2 * ez2.transpose() + cz2;
            let em = &mu1 + &ez2;
            let ik2 = &i_q - &k2;
            let cm = sym(&ik2 * &c1 * ik2.transpose() + &v2);
            let ik3 = &i_q - &k3;
            let cs_g = sym(&ik3 * &cm * ik3.transpose() + &v3);
            let cz3 = sym(&v3 + &k3 * &cm * k3.transpose());
            for &c in &g.curves {
                let ez3 = &k3 * (&a[c] - &em);
                szz[2] += &ez3 * ez3.transpose() + &cz3;
                es[c] = &em + ez3;
                cs[c] = cs_g.clone();
            }
        }
    }
    if !loglik.is_finite() {
        return Err(Error::Conditioning("factor log-likelihood is not finite".into()));
    }
    Ok(Moments { loglik, es, cs, szz })
}

/// One ECM sweep from `par` given its posterior moments, followed by the
/// likelihood-invariant re-orthonormalization of `W`.
fn cm_steps(prep: &Prepared, par: &Params, mom: &Moments) -> Result<Params> {
    let q = prep.q;
    let dim = prep.dim();
    let n = prep.r.len();
    let p = prep.xtx.nrows();
    let dinv = prep.noise_diag(&par.lambda).map(|v| 1.0 / v);
    let wd = DMatrix::from_fn(dim, q, |i, k| par.w[(i, k)] * dinv[i]);
    let mf = SpdFactor::new(sym(par.w.transpose() * &wd))?;

    // Fixed effects given W and Λ.
    let mut beta = par.beta.clone();
    if p > 0 {
        let mut rhs = DMatrix::zeros(p, q);
        for c in 0..n {
            let yhat = mf.solve(&(wd.transpose() * &prep.r[c]));
            rhs += &prep.x[c] * (yhat - &mom.es[c]).transpose();
        }
        beta = SpdFactor::new(prep.xtx.clone())?.solve_mat(&rhs);
    }

    // Loadings given β.
    let mut ry = DMatrix::zeros(dim, q);
    let mut vv = DMatrix::zeros(q, q);
    let mut ev = Vec::with_capacity(n);
    let mut cs_sum = DMatrix::zeros(q, q);
    for c in 0..n {
        let v = beta.transpose() * &prep.x[c] + &mom.es[c];
        ry += &prep.r[c] * v.transpose();
        vv += &v * v.transpose() + &mom.cs[c];
        cs_sum += &mom.cs[c];
        ev.push(v);
    }
    let w = SpdFactor::new(sym(vv))?.solve_mat(&ry.transpose()).transpose();

    // Noise variances given W and β.
    let mut lambda = DVector::<f64>::zeros(prep.n_coord);
    let t = prep.n_time;
    for (c, v) in ev.iter().enumerate() {
        let res = &prep.r[c] - &w * v;
        for (i, e) in res.iter().enumerate() {
            lambda[i / t] += e * e;
        }
    }
    let wcw = &w * &cs_sum * w.transpose();
    let scale = prep.r.iter().map(|r| r.norm_squared()).sum::<f64>() / (n * dim) as f64;
    for d in 0..prep.n_coord {
        let tr: f64 = (0..t).map(|k| wcw[(d * t + k, d * t + k)]).sum();
        lambda[d] = ((lambda[d] + tr) / (n * t) as f64).max(1e-14 * scale.max(f64::MIN_POSITIVE));
    }

    let counts = prep.level_counts();
    let psi = [
        sym(&mom.szz[0] / counts[0] as f64),
        sym(&mom.szz[1] / counts[1] as f64),
        sym(&mom.szz[2] / counts[2] as f64),
    ];
    orthonormalize(Params { w, beta, psi, lambda })
}

/// Rewrites `W = QR` as `Q` with `R` absorbed into β and Ψ; diag(R) > 0.
fn orthonormalize(par: Params) -> Result<Params> {
    let qr = par.w.clone().qr();
    let (mut qm, mut r) = (qr.q(), qr.r());
    for k in 0..r.nrows() {
        if r[(k, k)] < 0.0 {
            qm.column_mut(k).neg_mut();
            r.row_mut(k).neg_mut();
        }
        if r[(k, k)].abs() < 1e-12 {
            return Err(Error::Conditioning("loadings lost rank".into()));
        }
    }
    let psi = par.psi.map(|p| sym(&r * p * r.transpose()));
    Ok(Params {
        w: qm,
        beta: &par.beta * r.transpose(),
        psi,
        lambda: par.lambda,
    })
}

/// Rotates the latent space so that `Σ_l Ψ_l` is diagonal with descending
/// entries and fixes signs so each loading's largest-magnitude entry is positive.
fn identify(par: Params) -> Params {
    let q = par.w.ncols();
    let total = par.psi.iter().fold(DMatrix::zeros(q, q), |a, p| a + p);
    let eig = SymmetricEigen::new(sym(total));
    let mut idx: Vec<usize> = (0..q).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut u = DMatrix::from_fn(q, q, |r, c| eig.eigenvectors[(r, idx[c])]);
    let w0 = &par.w * &u;
    for k in 0..q {
        let col = w0.column(k);
        let big = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            u.column_mut(k).neg_mut();
        }
    }
    Params {
        w: &par.w * &u,
        beta: &par.beta * &u,
        psi: par.psi.map(|p| sym(u.transpose() * p * &u)),
        lambda: par.lambda,
    }
}

fn flatten(par: &Params) -> DVector<f64> {
    let mut v: Vec<f64> = par.w.as_slice().to_vec();
    v.extend_from_slice(par.beta.as_slice());
    for p in &par.psi {
        v.extend_from_slice(p.as_slice());
    }
    v.extend_from_slice(par.lambda.as_slice());
    DVector::from_vec(v)
}

/// Inverse of [`flatten`] with repairs for extrapolated points: Ψ is
/// symmetrized and its negative eigenvalues clipped, W re-orthonormalized.
/// Non-positive noise variances are rejected.
fn unflatten(v: &DVector<f64>, dim: usize, q: usize, p: usize, n_coord: usize) -> Result<Params> {
    let mut off = 0;
    let mut take = |len: usize| {
        let s = &v.as_slice()[off..off + len];
        off += len;
        s
    };
    let w = DMatrix::from_column_slice(dim, q, take(dim * q));
    let beta = DMatrix::from_column_slice(p, q, take(p * q));
    let mut psi = [DMatrix::zeros(q, q), DMatrix::zeros(q, q), DMatrix::zeros(q, q)];
    for ps in psi.iter_mut() {
        let m = sym(DMatrix::from_column_slice(q, q, take(q * q)));
        let eig = SymmetricEigen::new(m.clone());
        *ps = if eig.eigenvalues.iter().all(|&e| e >= 0.0) {
            m
        } else {
            let d = eig.eigenvalues.map(|e| e.max(0.0));
            sym(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
        };
    }
    let lambda = DVector::from_column_slice(take(n_coord));
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) || w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain {
            value: lambda.min(),
            domain: "noise variance > 0",
        });
    }
    orthonormalize(Params { w, beta, psi, lambda })
}

/// Outcome of one SQUAREM cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaremStep {
    pub x: DVector<f64>,
    pub loglik: f64,
    /// Step length used (−1 is the plain double update).
    pub alpha: f64,
    /// Whether the extrapolated point was kept.
    pub accelerated: bool,
    /// Number of fixed-point map evaluations.
    pub evaluations: usize,
}

/// One squared-extrapolation cycle for the fixed-point map `f` that
/// increases `loglik`.
///
/// With `r = F(x) − x` and `v = F(F(x)) − F(x) − r` the step length is
/// `α = −‖r‖/‖v‖`, clamped to `[−step_max, −1]`. The extrapolated point
/// `x − 2αr + α²v` is stabilized by one more map evaluation and kept only if
/// its log-likelihood is not below that at `x`; otherwise `F(F(x))` is
/// returned.
pub fn squarem_step<F, L>(mut f: F, mut loglik: L, x: &DVector<f64>, ll_x: f64, step_max: f64) -> Result<SquaremStep>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    L: FnMut(&DVector<f64>) -> Result<f64>,
{
    let x1 = f(x)?;
    let x2 = f(&x1)?;
    let r = &x1 - x;
    let v = &x2 - &x1 - &r;
    let (rn, vn) = (r.norm(), v.norm());
    let plain = |loglik: &mut L, x2: DVector<f64>| -> Result<SquaremStep> {
        let ll = loglik(&x2)?;
        Ok(SquaremStep {
            x: x2,
            loglik: ll,
            alpha: -1.0,
            accelerated: false,
            evaluations: 2,
        })
    };
    if rn == 0.0 || vn == 0.0 || !(rn / vn).is_finite() {
        return plain(&mut loglik, x2);
    }
    let alpha = (-rn / vn).clamp(-step_max, -1.0);
    if alpha == -1.0 {
        return plain(&mut loglik, x2);
    }
    let xp = x - &r * (2.0 * alpha) + &v * (alpha * alpha);
    let accelerated = f(&xp).and_then(|xs| {
        let ll = loglik(&xs)?;
        Ok((xs, ll))
    });
    match accelerated {
        Ok((xs, ll)) if ll.is_finite() && ll >= ll_x => Ok(SquaremStep {
            x: xs,
            loglik: ll,
            alpha,
            accelerated: true,
            evaluations: 3,
        }),
        _ => {
            let mut out = plain(&mut loglik, x2)?;
            out.alpha = alpha;
            out.evaluations = 3;
            Ok(out)
        }
    }
}

fn initialize(prep: &Prepared) -> Result<Params> {
    let (n, dim, q) = (prep.r.len(), prep.dim(), prep.q);
    let mean = prep.r.iter().fold(DVector::zeros(dim), |a, r| a + r) / n as f64;
    let centered = DMatrix::from_fn(n, dim, |c, i| prep.r[c][i] - mean[i]);
    let svd = centered.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Conditioning("SVD of path deviations failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < q {
        return Err(Error::Config(format!("{q} loadings exceed the {} available directions", order.len())));
    }
    let w = DMatrix::from_fn(dim, q, |i, k| vt[(order[k], i)]);
    let u: Vec<DVector<f64>> = prep.r.iter().map(|r| w.transpose() * r).collect();
    let p = prep.xtx.nrows();
    let beta = if p > 0 {
        let rhs = (0..n).fold(DMatrix::zeros(p, q), |a, c| a + &prep.x[c] * u[c].transpose());
        SpdFactor::new(prep.xtx.clone())?.solve_mat(&rhs)
    } else {
        DMatrix::zeros(0, q)
    };
    let mut var = DVector::zeros(q);
    for c in 0..n {
        let e = &u[c] - beta.transpose() * &prep.x[c];
        var += e.component_mul(&e);
    }
    var /= n as f64;
    let psi0 = DMatrix::from_diagonal(&var.map(|v| v.max(1e-12) / N_LEVELS as f64));
    let t = prep.n_time;
    let mut lambda = DVector::<f64>::zeros(prep.n_coord);
    for r in &prep.r {
        let res = r - &w * (w.transpose() * r);
        for (i, e) in res.iter().enumerate() {
            lambda[i / t] += e * e;
        }
    }
    let scale = prep.r.iter().map(|r| r.norm_squared()).sum::<f64>() / (n * dim) as f64;
    lambda = lambda.map(|l: f64| (l / (n * t) as f64).max(1e-6 * scale.max(f64::MIN_POSITIVE)));
    Ok(Params {
        w,
        beta,
        psi: [psi0.clone(), psi0.clone(), psi0],
        lambda,
    })
}

/// Maximum-likelihood fit with `q` loadings. `θ` is the mean of the
/// reference-height paths and stays fixed.
pub fn fit_factor(data: &FactorData, q: usize, design: &FactorDesign, settings: &EcmSettings) -> Result<FactorModel> {
    let dim = data.n_time() * data.n_coord();
    if q == 0 || q > dim {
        return Err(Error::Config(format!("number of loadings must be in 1..={dim}, got {q}")));
    }
    if q >= data.len() {
        return Err(Error::Config(format!("{q} loadings need more than {} curves", data.len())));
    }
    let mut heights: Vec<usize> = data.observations.iter().map(|o| o.height).collect();
    heights.sort_unstable();
    heights.dedup();
    design.validate(&heights)?;
    let theta = data.reference_mean()?;
    let prep = Prepared::new(data, &theta, design, q)?;
    let p = design.n_cols();
    let n_coord = prep.n_coord;

    let sweep = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let par = unflatten(v, dim, q, p, n_coord)?;
        let mom = e_step(&prep, &par)?;
        Ok(flatten(&cm_steps(&prep, &par, &mom)?))
    };
    let loglik = |v: &DVector<f64>| -> Result<f64> { Ok(e_step(&prep, &unflatten(v, dim, q, p, n_coord)?)?.loglik) };

    let mut x = flatten(&initialize(&prep)?);
    let mut ll = loglik(&x)?;
    let mut trace = vec![ll];
    let mut trace_sweeps = vec![0];
    let mut sweeps = 0;
    let mut converged = false;
    let mut step_max = 4.0;
    while sweeps < settings.max_sweeps {
        let (x_new, ll_new) = if settings.accelerate {
            let s = squarem_step(sweep, loglik, &x, ll, step_max)?;
            sweeps += s.evaluations;
            if s.accelerated && s.alpha == -step_max {
                step_max *= 4.0;
            }
            (s.x, s.loglik)
        } else {
            let x1 = sweep(&x)?;
            sweeps += 1;
            let l1 = loglik(&x1)?;
            (x1, l1)
        };
        if ll_new < ll - 1e-8 * ll.abs().max(1.0) {
            log::warn!("ECM log-likelihood decreased from {ll:.10e} to {ll_new:.10e}; keeping previous iterate");
            break;
        }
        let change = (ll_new - ll).abs() / ll.abs().max(1.0);
        x = x_new;
        ll = ll_new;
        trace.push(ll);
        trace_sweeps.push(sweeps);
        if change < settings.rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("factor ECM did not converge within {} sweeps; returning last iterate", settings.max_sweeps);
    }
    let par = identify(unflatten(&x, dim, q, p, n_coord)?);
    let final_ll = e_step(&prep, &par)?.loglik;
    Ok(FactorModel {
        q,
        n_time: prep.n_time,
        n_coord,
        theta,
        w: par.w,
        beta: par.beta,
        psi: par.psi.to_vec(),
        lambda: par.lambda,
        loglik: final_ll,
        design: design.clone(),
        n_curves: data.len(),
        data_fingerprint: data.fingerprint(),
        trace,
        trace_sweeps,
        sweeps,
        converged,
    })
}

/// Log-likelihood of `data` under `model` (θ taken from the model).
pub fn factor_loglik(model: &FactorModel, data: &FactorData) -> Result<f64> {
    let prep = Prepared::new(data, &model.theta, &model.design, model.q)?;
    let par = Params {
        w: model.w.clone(),
        beta: model.beta.clone(),
        psi: [model.psi[0].clone(), model.psi[1].clone(), model.psi[2].clone()],
        lambda: model.lambda.clone(),
    };
    Ok(e_step(&prep, &par)?.loglik)
}

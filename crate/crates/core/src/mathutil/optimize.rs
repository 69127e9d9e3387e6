use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings shared by the dense optimizers in this module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_evals: usize,
    /// Infinity norm of the projected gradient at which a quasi-Newton run stops.
    pub grad_tol: f64,
    /// Relative decrease of the objective below which a run counts as converged.
    pub f_tol: f64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Number of restarts from the best point found (simplex method only).
    pub restarts: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            grad_tol: 1e-8,
            f_tol: 1e-12,
            lower: None,
            upper: None,
            restarts: 1,
        }
    }
}

impl OptimizerSettings {
    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.grad_tol > 0.0) || !(self.f_tol > 0.0) {
            return Err(Error::Parameter("optimizer tolerances must be positive".into()));
        }
        for bound in [&self.lower, &self.upper].into_iter().flatten() {
            if bound.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: bound.len(),
                });
            }
        }
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            if lo.iter().zip(hi).any(|(l, h)| l > h) {
                return Err(Error::Parameter("lower bound exceeds upper bound".into()));
            }
        }
        Ok(())
    }

    fn lower(&self, i: usize) -> f64 {
        self.lower.as_ref().map_or(f64::NEG_INFINITY, |b| b[i])
    }

    fn upper(&self, i: usize) -> f64 {
        self.upper.as_ref().map_or(f64::INFINITY, |b| b[i])
    }

    fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lower(i), self.upper(i));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxEvaluations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub status: Status,
    pub evaluations: usize,
}

/// Central-difference gradient that switches to one-sided differences at
/// active bounds. Returns the objective value at `x`.
pub fn numerical_gradient<F>(f: &mut F, x: &[f64], settings: &OptimizerSettings, grad: &mut [f64]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let fx = f(x);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 6e-6 * x[i].abs().max(1.0);
        let (lo, hi) = (settings.lower(i), settings.upper(i));
        let up = x[i] + h <= hi;
        let down = x[i] - h >= lo;
        grad[i] = if up && down {
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            (fp - fm) / (2.0 * h)
        } else if up {
            probe[i] = x[i] + h;
            (f(&probe) - fx) / h
        } else if down {
            probe[i] = x[i] - h;
            (fx - f(&probe)) / h
        } else {
            0.0
        };
        probe[i] = x[i];
    }
    fx
}

/// Box-constrained minimization of an objective without a supplied gradient.
///
/// Runs projected BFGS on central-difference gradients. The returned value
/// never exceeds `f(x0)` (after projecting `x0` into the box).
pub fn bounded_minimize<F>(mut f: F, x0: &[f64], settings: &OptimizerSettings) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let settings_ref = settings.clone();
    let res = minimize_with_gradient(
        |x, g| {
            evals += 1 + 2 * n;
            numerical_gradient(&mut f, x, &settings_ref, g)
        },
        x0,
        settings,
    )?;
    Ok(Minimum {
        evaluations: evals,
        ..res
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected BFGS with Armijo backtracking along the projection arc.
///
/// `fg(x, grad)` must return the objective value and fill `grad`. Variables
/// sitting on a bound with the gradient pointing outward are frozen for the
/// step. The dense inverse-Hessian approximation is reset to a scaled
/// identity whenever the quasi-Newton direction fails to descend.
pub fn minimize_with_gradient<F>(mut fg: F, x0: &[f64], settings: &OptimizerSettings) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    settings.validate(n)?;
    let mut x = x0.to_vec();
    settings.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = fg(&x, &mut g);
    let mut evals = 1;
    if !fx.is_finite() {
        return Err(Error::Optimizer(format!(
            "objective is not finite at the initial point ({fx})"
        )));
    }
    if n == 0 {
        return Ok(Minimum {
            x,
            value: fx,
            status: Status::Converged,
            evaluations: evals,
        });
    }

    let mut hinv = identity(n);
    let mut fresh_hessian = true;
    let mut status = Status::MaxEvaluations;
    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut small_steps = 0;

    while evals < settings.max_evals {
        let active: Vec<bool> = (0..n)
            .map(|i| {
                let eps = 1e-12 * (1.0 + x[i].abs());
                (x[i] <= settings.lower(i) + eps && g[i] > 0.0)
                    || (x[i] >= settings.upper(i) - eps && g[i] < 0.0)
            })
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| !active[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm < settings.grad_tol {
            status = Status::Converged;
            break;
        }

        compute_direction(&hinv, &g, &active, &mut d);
        if !(dot(&g, &d) < 0.0) {
            hinv = identity(n);
            fresh_hessian = true;
            compute_direction(&hinv, &g, &active, &mut d);
        }

        // First step of a fresh identity model: cap its length so the
        // initial trial point is scale-aware.
        let mut alpha = if fresh_hessian {
            let dn = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if dn > 1.0 {
                1.0 / dn
            } else {
                1.0
            }
        } else {
            1.0
        };

        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            settings.project(&mut x_new);
            let step: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            f_new = fg(&x_new, &mut g_new);
            evals += 1;
            if f_new.is_finite() && f_new <= fx + 1e-4 * decrease.min(0.0) && f_new <= fx {
                accepted = true;
                break;
            }
            if evals >= settings.max_evals {
                break;
            }
            alpha *= 0.5;
        }

        if !accepted {
            if !fresh_hessian {
                hinv = identity(n);
                fresh_hessian = true;
                continue;
            }
            status = if evals >= settings.max_evals {
                Status::MaxEvaluations
            } else {
                Status::LineSearchFailed
            };
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy > 0.0 {
            if fresh_hessian {
                let scale = sy / yy;
                hinv = identity(n);
                for i in 0..n {
                    hinv[i * n + i] = scale;
                }
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            fresh_hessian = false;
        }

        let rel = (fx - f_new) / fx.abs().max(f_new.abs()).max(1e-300);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if rel < settings.f_tol {
            small_steps += 1;
            if small_steps >= 3 {
                status = Status::Converged;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    Ok(Minimum {
        x,
        value: fx,
        status,
        evaluations: evals,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn compute_direction(hinv: &[f64], g: &[f64], active: &[bool], d: &mut [f64]) {
    let n = g.len();
    for i in 0..n {
        if active[i] {
            d[i] = 0.0;
            continue;
        }
        let row = &hinv[i * n..(i + 1) * n];
        d[i] = -(0..n).filter(|&j| !active[j]).map(|j| row[j] * g[j]).sum::<f64>();
    }
}

/// Inverse BFGS update H <- (I - rho s y') H (I - rho y s') + rho s s'.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let coef = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Derivative-free Nelder-Mead simplex search with box clamping.
///
/// `step` is the initial simplex edge along each coordinate.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: &[f64], settings: &OptimizerSettings) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    settings.validate(n)?;
    if step.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: step.len(),
        });
    }
    let mut best = x0.to_vec();
    settings.project(&mut best);
    let mut best_f = f(&best);
    let mut evals = 1;
    if !best_f.is_finite() {
        return Err(Error::Optimizer(format!(
            "objective is not finite at the initial point ({best_f})"
        )));
    }
    let mut status = Status::MaxEvaluations;
    for _ in 0..=settings.restarts {
        let run = nelder_mead_once(&mut f, &best, best_f, step, settings, settings.max_evals.saturating_sub(evals));
        evals += run.evaluations;
        let improved = run.value < best_f;
        if run.value <= best_f {
            best = run.x;
            best_f = run.value;
        }
        status = run.status;
        if !improved || evals >= settings.max_evals {
            break;
        }
    }
    Ok(Minimum {
        x: best,
        value: best_f,
        status,
        evaluations: evals,
    })
}

fn nelder_mead_once<F>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    step: &[f64],
    settings: &OptimizerSettings,
    budget: usize,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &mut Vec<f64>, evals: &mut usize| {
        settings.project(x);
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step[i];
        if v[i] > settings.upper(i) {
            v[i] = x0[i] - step[i];
        }
        let fv = eval(&mut v, &mut evals);
        simplex.push((v, fv));
    }

    let mut status = Status::MaxEvaluations;
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (f_worst - f_best).abs() <= settings.f_tol * (f_best.abs() + 1e-30) && size < 1e-8
            || size < 1e-12
        {
            status = Status::Converged;
            break;
        }
        if (f_worst - f_best).abs() <= settings.f_tol * (f_best.abs() + 1e-30) * 1e-2 {
            status = Status::Converged;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let along = |t: f64| -> Vec<f64> {
            (0..n).map(|i| centroid[i] + t * (worst[i] - centroid[i])).collect()
        };

        let mut xr = along(-1.0);
        let fr = eval(&mut xr, &mut evals);
        if fr < simplex[0].1 {
            let mut xe = along(-2.0);
            let fe = eval(&mut xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (mut xc, t) = if fr < simplex[n].1 {
                (along(-0.5), fr)
            } else {
                (along(0.5), simplex[n].1)
            };
            let fc = eval(&mut xc, &mut evals);
            if fc < t {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for k in 1..=n {
                    let mut v: Vec<f64> = (0..n)
                        .map(|i| best[i] + 0.5 * (simplex[k].0[i] - best[i]))
                        .collect();
                    let fv = eval(&mut v, &mut evals);
                    simplex[k] = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        status,
        evaluations: evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64], g: &mut [f64]) -> f64 {
        g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
        g[1] = 200.0 * (x[1] - x[0] * x[0]);
        rosenbrock(x)
    }

    #[test]
    fn quadratic_interior_minimum() {
        let s = OptimizerSettings::default().with_bounds(vec![0.0], vec![10.0]);
        let m = bounded_minimize(|x| (x[0] - 3.0).powi(2), &[7.0], &s).unwrap();
        assert_abs_diff_eq!(m.x[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn quadratic_active_bound() {
        let s = OptimizerSettings::default().with_bounds(vec![0.0], vec![2.0]);
        let m = bounded_minimize(|x| (x[0] - 3.0).powi(2), &[0.5], &s).unwrap();
        assert_eq!(m.x[0], 2.0);
        assert_eq!(m.status, Status::Converged);
    }

    #[test]
    fn rosenbrock_numeric_gradient() {
        let s = OptimizerSettings {
            max_evals: 20_000,
            ..Default::default()
        };
        let m = bounded_minimize(rosenbrock, &[-1.2, 1.0], &s).unwrap();
        assert!(m.value < 1e-8, "value {}", m.value);
    }

    #[test]
    fn rosenbrock_analytic_gradient() {
        let s = OptimizerSettings::default();
        let m = minimize_with_gradient(rosenbrock_grad, &[-1.2, 1.0], &s).unwrap();
        assert!(m.value < 1e-12, "value {}", m.value);
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let s = OptimizerSettings {
            max_evals: 5000,
            f_tol: 1e-14,
            restarts: 3,
            ..Default::default()
        };
        let m = nelder_mead(rosenbrock, &[-1.2, 1.0], &[0.5, 0.5], &s).unwrap();
        assert!(m.value < 1e-8, "value {}", m.value);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let s = OptimizerSettings::default();
        assert!(bounded_minimize(|_| f64::NAN, &[0.0], &s).is_err());
    }

    #[test]
    fn never_leaves_the_box() {
        let s = OptimizerSettings::default().with_bounds(vec![-1.0, 0.5], vec![0.25, 3.0]);
        let m = bounded_minimize(rosenbrock, &[0.0, 1.0], &s).unwrap();
        assert!(m.x[0] >= -1.0 && m.x[0] <= 0.25);
        assert!(m.x[1] >= 0.5 && m.x[1] <= 3.0);
        let nm = nelder_mead(rosenbrock, &[0.0, 1.0], &[1.0, 1.0], &s).unwrap();
        assert!(nm.x[0] >= -1.0 && nm.x[0] <= 0.25);
        assert!(nm.x[1] >= 0.5 && nm.x[1] <= 3.0);
    }

    #[test]
    fn value_never_exceeds_start() {
        let s = OptimizerSettings {
            max_evals: 10,
            ..Default::default()
        };
        let f0 = rosenbrock(&[-1.2, 1.0]);
        let m = bounded_minimize(rosenbrock, &[-1.2, 1.0], &s).unwrap();
        assert!(m.value <= f0);
    }
}

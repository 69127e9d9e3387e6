use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{Error, Result};

/// Local move sets of dynamic time warping.
///
/// Moves are `(Δi, Δj)` with `i` indexing the query `x` and `j` the
/// reference `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepPattern {
    /// Moves (1,0), (0,1), (1,1) without slope constraints.
    Symmetric,
    /// Moves (1,0), (1,1), (1,2): the query advances every step and the
    /// local slope lies in [0, 2].
    #[default]
    Asymmetric,
    /// Composite moves (1,1), (3,2), (2,3) built from unit steps so that a
    /// horizontal or vertical step is always preceded by two diagonal steps
    /// (slope constraint 2). Cells are weighted by the query advance of the
    /// step entering them.
    SakoeChiba,
}

impl std::str::FromStr for StepPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "symmetric" => Ok(Self::Symmetric),
            "asymmetric" => Ok(Self::Asymmetric),
            "sakoe_chiba" | "sakoechiba" => Ok(Self::SakoeChiba),
            other => Err(Error::Config(format!("unknown step pattern '{other}'"))),
        }
    }
}

/// One move of a pattern: the unit steps it is made of, each with the
/// weight of the cell it enters.
struct Move {
    steps: &'static [(usize, usize, f64)],
}

const SYMMETRIC: &[Move] = &[
    Move { steps: &[(1, 1, 1.0)] },
    Move { steps: &[(1, 0, 1.0)] },
    Move { steps: &[(0, 1, 1.0)] },
];

const ASYMMETRIC: &[Move] = &[
    Move { steps: &[(1, 1, 1.0)] },
    Move { steps: &[(1, 0, 1.0)] },
    Move { steps: &[(1, 2, 1.0)] },
];

const SAKOE_CHIBA: &[Move] = &[
    Move { steps: &[(1, 1, 1.0)] },
    Move {
        steps: &[(1, 1, 1.0), (1, 1, 1.0), (1, 0, 1.0)],
    },
    Move {
        steps: &[(1, 1, 1.0), (1, 1, 1.0), (0, 1, 0.0)],
    },
];

impl StepPattern {
    fn moves(&self) -> &'static [Move] {
        match self {
            Self::Symmetric => SYMMETRIC,
            Self::Asymmetric => ASYMMETRIC,
            Self::SakoeChiba => SAKOE_CHIBA,
        }
    }

    pub fn all() -> [StepPattern; 3] {
        [Self::Symmetric, Self::Asymmetric, Self::SakoeChiba]
    }
}

/// Optimal alignment of a query against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwAlignment {
    /// Minimal weighted sum of squared pointwise differences.
    pub cost: f64,
    /// `cost` divided by the path length (symmetric) or the query length
    /// (asymmetric patterns).
    pub distance: f64,
    /// Visited cells `(i, j)` (0-based), from `(0, 0)` to `(n−1, m−1)`.
    pub path: Vec<(usize, usize)>,
}

/// Globally optimal alignment of `x` (query) to `y` (reference) with
/// squared pointwise cost. Ties prefer the first move of the pattern.
pub fn dtw_align(x: &[f64], y: &[f64], pattern: StepPattern) -> Result<DtwAlignment> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(Error::Validation("DTW needs sequences of length at least 2".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("DTW inputs must be finite".into()));
    }
    let d = |i: usize, j: usize| (x[i] - y[j]).powi(2);
    let moves = pattern.moves();
    let mut acc = vec![f64::INFINITY; n * m];
    let mut from: Vec<u8> = vec![u8::MAX; n * m];
    acc[0] = d(0, 0);
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            let mut arg = u8::MAX;
            for (k, mv) in moves.iter().enumerate() {
                let (di, dj) = mv.steps.iter().fold((0, 0), |(a, b), s| (a + s.0, b + s.1));
                if di > i || dj > j {
                    continue;
                }
                let start = acc[(i - di) * m + (j - dj)];
                if !start.is_finite() {
                    continue;
                }
                let (mut ci, mut cj) = (i - di, j - dj);
                let mut total = start;
                for &(si, sj, w) in mv.steps {
                    ci += si;
                    cj += sj;
                    total += w * d(ci, cj);
                }
                if total < best {
                    best = total;
                    arg = k as u8;
                }
            }
            acc[i * m + j] = best;
            from[i * m + j] = arg;
        }
    }
    let cost = acc[n * m - 1];
    if !cost.is_finite() {
        return Err(Error::Infeasible(format!(
            "no admissible {pattern:?} path between lengths {n} and {m}"
        )));
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mv = &moves[from[i * m + j] as usize];
        for &(si, sj, _) in mv.steps.iter().rev() {
            i -= si;
            j -= sj;
            path.push((i, j));
        }
    }
    path.reverse();
    let norm = match pattern {
        StepPattern::Symmetric => path.len() as f64,
        _ => n as f64,
    };
    Ok(DtwAlignment {
        cost,
        distance: cost / norm,
        path,
    })
}

/// Linear interpolation of `(times, values)` on `n` equidistant points of
/// [0, 1], constant beyond the data range.
pub fn resample_linear(times: &[f64], values: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            let r = times.partition_point(|&s| s <= t);
            if r == 0 {
                values[0]
            } else if r >= times.len() {
                values[times.len() - 1]
            } else {
                let (t0, t1) = (times[r - 1], times[r]);
                let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                values[r - 1] + w * (values[r] - values[r - 1])
            }
        })
        .collect()
}

/// Least-squares spline with `df` equidistant cubic basis functions
/// through pooled points; returns its values on `grid`.
fn pooled_spline(basis: &SplineBasis, points: &[(f64, f64)], grid: &[f64]) -> Result<Vec<f64>> {
    let t: Vec<f64> = points.iter().map(|p| p.0).collect();
    let phi = basis.design_matrix(&t)?;
    let y = nalgebra::DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = (phi.transpose() * &phi).svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let c = svd
        .solve(&(phi.transpose() * y), tol)
        .map_err(|e| Error::Conditioning(e.to_string()))?;
    let g = basis.design_matrix(grid)?;
    Ok((g * c).iter().cloned().collect())
}

/// Template of curves sampled on a common grid of `[0, 1]`: a spline with
/// `df` basis functions is fitted to the pooled points, every sample is
/// re-aligned to it with `pattern`, and the two steps are repeated
/// `iterations` times. Returns the template on the same grid.
pub fn dtw_template(samples: &[Vec<f64>], df: usize, iterations: usize, pattern: StepPattern) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("DTW template needs at least one sample".into()))?;
    let n = first.len();
    if n < 2 || samples.iter().any(|s| s.len() != n) {
        return Err(Error::Validation("DTW template samples must share a grid of at least 2 points".into()));
    }
    let degree = 3.min(df.saturating_sub(1));
    let basis = SplineBasis::equidistant(df, degree)?;
    let grid: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let mut points: Vec<(f64, f64)> = samples
        .iter()
        .flat_map(|s| grid.iter().cloned().zip(s.iter().cloned()))
        .collect();
    let mut template = pooled_spline(&basis, &points, &grid)?;
    for _ in 0..iterations {
        points.clear();
        for s in samples {
            let a = dtw_align(s, &template, pattern)?;
            points.extend(a.path.iter().map(|&(i, j)| (grid[j], s[i])));
        }
        template = pooled_spline(&basis, &points, &grid)?;
    }
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive enumeration of admissible paths, written independently of
    /// the dynamic program: the pattern is restated as lists of unit steps.
    fn brute_force(x: &[f64], y: &[f64], pattern: StepPattern) -> Option<f64> {
        let moves: Vec<Vec<(usize, usize, f64)>> = match pattern {
            StepPattern::Symmetric => vec![vec![(1, 1, 1.0)], vec![(1, 0, 1.0)], vec![(0, 1, 1.0)]],
            StepPattern::Asymmetric => vec![vec![(1, 1, 1.0)], vec![(1, 0, 1.0)], vec![(1, 2, 1.0)]],
            StepPattern::SakoeChiba => vec![
                vec![(1, 1, 1.0)],
                vec![(1, 1, 1.0), (1, 1, 1.0), (1, 0, 1.0)],
                vec![(1, 1, 1.0), (1, 1, 1.0), (0, 1, 0.0)],
            ],
        };
        fn rec(
            x: &[f64],
            y: &[f64],
            moves: &[Vec<(usize, usize, f64)>],
            i: usize,
            j: usize,
            acc: f64,
            best: &mut Option<f64>,
        ) {
            if i == x.len() - 1 && j == y.len() - 1 {
                *best = Some(best.map_or(acc, |b: f64| b.min(acc)));
                return;
            }
            for mv in moves {
                let (mut ci, mut cj, mut total) = (i, j, acc);
                let mut ok = true;
                for &(si, sj, w) in mv {
                    ci += si;
                    cj += sj;
                    if ci >= x.len() || cj >= y.len() {
                        ok = false;
                        break;
                    }
                    total += w * (x[ci] - y[cj]).powi(2);
                }
                if ok {
                    rec(x, y, moves, ci, cj, total, best);
                }
            }
        }
        let mut best = None;
        rec(x, y, &moves, 0, 0, (x[0] - y[0]).powi(2), &mut best);
        best
    }

    #[test]
    fn identical_inputs_align_diagonally() {
        let x = [0.1, 0.5, -0.3, 0.8];
        for p in StepPattern::all() {
            let a = dtw_align(&x, &x, p).unwrap();
            assert_eq!(a.cost, 0.0);
            assert_eq!(a.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        }
    }

    #[test]
    fn exact_stretch_match() {
        let a = dtw_align(&[0.0, 1.0], &[0.0, 0.0, 1.0], StepPattern::Symmetric).unwrap();
        assert_eq!(a.cost, 0.0);
        assert_eq!(a.path, vec![(0, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(2..=6);
            let m = rng.random_range(2..=6);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            for p in StepPattern::all() {
                match (dtw_align(&x, &y, p), brute_force(&x, &y, p)) {
                    (Ok(a), Some(b)) => assert_eq!(a.cost, b, "{p:?} {n}x{m}"),
                    (Err(Error::Infeasible(_)), None) => {}
                    (a, b) => panic!("{p:?} {n}x{m}: {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn path_cost_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        for p in [StepPattern::Symmetric, StepPattern::Asymmetric] {
            let a = dtw_align(&x, &y, p).unwrap();
            let direct: f64 = a.path.iter().map(|&(i, j)| (x[i] - y[j]).powi(2)).sum();
            assert!((a.cost - direct).abs() < 1e-12);
            assert!(a.path.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        }
    }

    #[test]
    fn symmetric_pattern_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..rng.random_range(2..20)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..rng.random_range(2..20)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = dtw_align(&x, &y, StepPattern::Symmetric).unwrap().cost;
            let b = dtw_align(&y, &x, StepPattern::Symmetric).unwrap().cost;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shift_invariance() {
        let x = [0.0, 0.25, 0.5, 1.0, 0.75];
        let y = [0.0, 0.5, 1.0, 0.5];
        for p in StepPattern::all() {
            let base = dtw_align(&x, &y, p);
            let xs: Vec<f64> = x.iter().map(|v| v + 4.0).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + 4.0).collect();
            match (base, dtw_align(&xs, &ys, p)) {
                (Ok(a), Ok(b)) => assert_eq!(a.path, b.path),
                (Err(_), Err(_)) => {}
                _ => panic!("feasibility changed"),
            }
        }
    }

    #[test]
    fn infeasible_asymmetric_endpoint() {
        let err = dtw_align(&[0.0, 1.0], &[0.0, 1.0, 2.0, 3.0], StepPattern::Asymmetric).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    fn bump(center: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                (-((t - center) / 0.08).powi(2)).exp()
            })
            .collect()
    }

    #[test]
    fn template_of_one_sample_is_its_smooth() {
        let s = bump(0.5, 100);
        let grid: Vec<f64> = (0..100).map(|k| k as f64 / 99.0).collect();
        let basis = SplineBasis::equidistant(15, 3).unwrap();
        let points: Vec<(f64, f64)> = grid.iter().cloned().zip(s.iter().cloned()).collect();
        let smooth = pooled_spline(&basis, &points, &grid).unwrap();
        let t = dtw_template(&[s.clone()], 15, 5, StepPattern::Asymmetric).unwrap();
        let rms = (t.iter().zip(&smooth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(rms < 0.02, "{rms}");
        let twice = dtw_template(&[s.clone(), s], 15, 5, StepPattern::Asymmetric).unwrap();
        for (a, b) in twice.iter().zip(&t) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn template_bump_lies_between_sample_bumps() {
        let samples = vec![bump(0.4, 100), bump(0.6, 100)];
        let t = dtw_template(&samples, 20, 5, StepPattern::Asymmetric).unwrap();
        let peak = t
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k as f64 / 99.0)
            .unwrap();
        assert!(peak > 0.4 && peak < 0.6, "{peak}");
    }

    #[test]
    fn linear_resampling() {
        let r = resample_linear(&[0.0, 0.5, 1.0], &[0.0, 1.0, 0.0], 5);
        assert_eq!(r, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
        let r = resample_linear(&[0.2, 0.8], &[1.0, 2.0], 3);
        assert_eq!(r, vec![1.0, 1.5, 2.0]);
    }
}

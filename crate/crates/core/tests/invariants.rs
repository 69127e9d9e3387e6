use proptest::prelude::*;

use tms_core::basis::SplineBasis;
use tms_core::classify::{dtw_align, StepPattern};
use tms_core::mathutil::{chi2_cdf, chi2_quantile};
use tms_core::warp::{eval_warp, FixedWarp, Interpolation, WarpConfig};

fn sorted_anchors(raw: Vec<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = raw.into_iter().map(|x| 0.02 + 0.96 * x).collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    v
}

proptest! {
    #[test]
    fn spline_basis_is_a_partition_of_unity(k in 4usize..20, t in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
        let b = SplineBasis::equidistant(k, 3).unwrap();
        let m = b.design_matrix(&t).unwrap();
        for r in 0..t.len() {
            prop_assert!((m.row(r).sum() - 1.0).abs() < 1e-12);
            prop_assert!(m.row(r).iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn increasing_fixed_warps_are_monotone_and_fix_endpoints(
        raw in proptest::collection::vec(0.0f64..1.0, 1..5),
        cubic in any::<bool>(),
    ) {
        let values = sorted_anchors(raw);
        let interp = if cubic { Interpolation::Cubic } else { Interpolation::Linear };
        let cfg = WarpConfig::new(values.len(), interp);
        let t: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let w = eval_warp(&cfg, &FixedWarp { values }, None, &t).unwrap();
        prop_assert!(w[0].abs() < 1e-12);
        prop_assert!((w[200] - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[1] >= p[0] - 1e-12));
    }

    #[test]
    fn dtw_of_a_series_with_itself_is_free(x in proptest::collection::vec(-5.0f64..5.0, 2..30)) {
        for p in StepPattern::all() {
            prop_assert_eq!(dtw_align(&x, &x, p).unwrap().cost, 0.0);
        }
    }

    #[test]
    fn symmetric_dtw_is_symmetric(
        x in proptest::collection::vec(-5.0f64..5.0, 2..20),
        y in proptest::collection::vec(-5.0f64..5.0, 2..20),
    ) {
        let a = dtw_align(&x, &y, StepPattern::Symmetric).unwrap().cost;
        let b = dtw_align(&y, &x, StepPattern::Symmetric).unwrap().cost;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn chi2_quantile_inverts_cdf(p in 0.001f64..0.999, k in 1u32..40) {
        let x = chi2_quantile(p, k as f64).unwrap();
        prop_assert!((chi2_cdf(x, k as f64).unwrap() - p).abs() < 1e-9);
    }
}

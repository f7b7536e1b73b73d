//! Cross-checks the masking-error routines against direct enumeration.

use proptest::prelude::*;
use rankmerge::linalg::{best_rank_r, frobenius_norm, svd};
use rankmerge::theory::{
    equal_budget_s, output_mask_error, output_mask_error_lower_bound, param_count_out,
    param_count_rank, random_instance, rank_mask_error, run_verification, theorem_check, Ensemble,
    SearchMethod, SearchMode, VerifyConfig,
};
use rankmerge::{Execution, Matrix};

/// `min ‖X − diag(keep)·Y‖_F` over all `d_s`-subsets, computed with whole
/// matrix products rather than row costs.
fn brute_force_output_error(x: &Matrix, r: usize, d_s: usize) -> f64 {
    let y = best_rank_r(x, r).unwrap();
    let n = x.rows();
    (0u32..1 << n)
        .filter(|bits| bits.count_ones() as usize == d_s)
        .map(|bits| {
            let keep: Vec<f64> = (0..n).map(|i| f64::from((bits >> i) & 1)).collect();
            frobenius_norm(&x.sub(&y.scale_rows(&keep).unwrap()).unwrap())
        })
        .fold(f64::INFINITY, f64::min)
}

fn arb_instance() -> impl Strategy<Value = (Matrix, usize, usize)> {
    (2usize..8, 2usize..8).prop_flat_map(|(rows, cols)| {
        let p = rows.min(cols);
        (
            prop::collection::vec(-3.0f64..3.0, rows * cols),
            1..=p,
            0..=rows,
        )
            .prop_map(move |(v, r, d_s)| (Matrix::new(rows, cols, v).unwrap(), r, d_s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exhaustive_search_matches_enumeration((x, r, d_s) in arb_instance()) {
        let oracle = brute_force_output_error(&x, r, d_s);
        let got = output_mask_error(&x, r, d_s, SearchMode::Exhaustive).unwrap();
        prop_assert_eq!(got.method, SearchMethod::Exhaustive);
        prop_assert_eq!(got.mask.iter().filter(|&&k| k).count(), d_s);
        prop_assert!((got.error - oracle).abs() < 1e-9 * frobenius_norm(&x).max(1.0));
    }

    #[test]
    fn greedy_search_matches_enumeration((x, r, d_s) in arb_instance()) {
        let oracle = brute_force_output_error(&x, r, d_s);
        let got = output_mask_error(&x, r, d_s, SearchMode::Greedy).unwrap();
        prop_assert!((got.error - oracle).abs() < 1e-9 * frobenius_norm(&x).max(1.0));
    }

    #[test]
    fn rank_error_is_truncation_error((x, r, _) in arb_instance(), frac in 0.0f64..=1.0) {
        let s = (frac * r as f64).floor() as usize;
        let oracle = if s == 0 {
            frobenius_norm(&x)
        } else {
            frobenius_norm(&x.sub(&best_rank_r(&x, s).unwrap()).unwrap())
        };
        prop_assert!((rank_mask_error(&x, r, s).unwrap() - oracle).abs() < 1e-9 * frobenius_norm(&x).max(1.0));
    }

    #[test]
    fn equal_budget_never_exceeds_output_budget(d_out in 1usize..40, d_in in 1usize..40, r in 1usize..20, frac in 0.0f64..=1.0) {
        let d_s = (frac * d_out as f64).floor() as usize;
        let s = equal_budget_s(r, d_out, d_in, d_s).unwrap();
        prop_assert!(s <= r);
        prop_assert!(param_count_rank(d_out, d_in, s) <= param_count_out(d_out, d_in, r, d_s));
        if s < r {
            prop_assert!(param_count_rank(d_out, d_in, s + 1) > param_count_out(d_out, d_in, r, d_s));
        }
    }
}

#[test]
fn bound_formula_by_hand() {
    // σ = (3, 2, 1), r = 2, f = 0.5: √(0.5·(9 + 4) + 1) = √7.5
    let got = output_mask_error_lower_bound(&[3.0, 2.0, 1.0], 2, 0.5).unwrap();
    assert!((got - 7.5f64.sqrt()).abs() < 1e-15);
    assert!(output_mask_error_lower_bound(&[1.0], 1, 1.5).is_err());
}

#[test]
fn diagonal_example_values() {
    let x = Matrix::from_diag(&[4.0, 3.0, 2.0, 1.0, 0.0, 0.0]).unwrap();
    let check = theorem_check(&x, 3, 4, SearchMode::Exhaustive).unwrap();
    assert_eq!(check.budget.s, 2);
    assert!((check.e_rank - 5f64.sqrt()).abs() < 1e-12);
    assert!((check.e_out - 1.0).abs() < 1e-12);
    assert!(!check.holds);
}

#[test]
fn verification_report_agrees_with_direct_checks() {
    let config = VerifyConfig {
        trials: 12,
        d_out: 6,
        d_in: 6,
        r: 3,
        d_s: 4,
        seed: 9,
        mode: SearchMode::Exhaustive,
        ensemble: Ensemble::default(),
    };
    let report = run_verification(&config, Execution::Sequential).unwrap();
    assert_eq!(report.instances.len(), 12);
    for (rec, spec) in report.instances.iter().zip(config.instances()) {
        let x = random_instance(spec.d_out, spec.d_in, spec.ensemble, spec.seed).unwrap();
        let e_out = brute_force_output_error(&x, 3, 4);
        let sigma = svd(&x).unwrap().sigma;
        let e_rank = sigma[rec.s..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((rec.e_out - e_out).abs() < 1e-9);
        assert!((rec.e_rank - e_rank).abs() < 1e-9);
        assert_eq!(rec.holds, e_rank <= e_out + 1e-9);
    }
    let holds = report.instances.iter().filter(|r| r.holds).count() as f64 / 12.0;
    assert_eq!(report.holds_fraction, holds);
    assert_eq!(
        report.counterexamples.len(),
        report.instances.iter().filter(|r| !r.holds).count()
    );
    let parallel = run_verification(&config, Execution::Parallel).unwrap();
    assert_eq!(
        serde_json::to_string(&parallel).unwrap(),
        serde_json::to_string(&report).unwrap()
    );
}

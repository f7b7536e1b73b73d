use proptest::prelude::*;
use rankmerge::lora::{
    apply_output_mask, apply_rank_mask, binarize, delta_weight, fold_output_masks, fold_rank_masks,
    mask_rank, merged_delta,
};
use rankmerge::{LoraLayer, MaskPair, MaskVector, Matrix};

fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn arb_layer(d_out: usize, d_in: usize, r: usize) -> impl Strategy<Value = LoraLayer> {
    (arb_matrix(d_out, r), arb_matrix(r, d_in), 0.5f64..16.0)
        .prop_map(|(a, b, alpha)| LoraLayer::new("layer", a, b, alpha).unwrap())
}

fn arb_pair() -> impl Strategy<Value = (LoraLayer, LoraLayer, MaskPair)> {
    (1usize..7, 1usize..7, 1usize..5, 1usize..5).prop_flat_map(|(d_out, d_in, rc, rs)| {
        (
            arb_layer(d_out, d_in, rc),
            arb_layer(d_out, d_in, rs),
            prop::collection::vec(0.0f64..=1.0, rc),
            prop::collection::vec(0.0f64..=1.0, rs),
        )
            .prop_map(|(c, s, mc, ms)| {
                (
                    c,
                    s,
                    MaskPair::new(MaskVector::new(mc).unwrap(), MaskVector::new(ms).unwrap()),
                )
            })
    })
}

/// `scale · a_k b_kᵀ`, written out entry by entry.
fn outer(layer: &LoraLayer, k: usize) -> Matrix {
    Matrix::from_fn(layer.d_out(), layer.d_in(), |i, j| {
        layer.scale() * layer.a().get(i, k) * layer.b().get(k, j)
    })
    .unwrap()
}

/// `scale · Σ_k m_k a_k b_kᵀ` by explicit summation.
fn masked_sum(layer: &LoraLayer, m: &[f64]) -> Matrix {
    Matrix::from_fn(layer.d_out(), layer.d_in(), |i, j| {
        (0..layer.rank())
            .map(|k| m[k] * layer.a().get(i, k) * layer.b().get(k, j))
            .sum::<f64>()
            * layer.scale()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ones_mask_is_identity((c, _, _) in arb_pair()) {
        let masked = apply_rank_mask(&c, &MaskVector::ones(c.rank())).unwrap();
        prop_assert!(masked.max_abs_diff(&delta_weight(&c).unwrap()) < 1e-9);
        let out = apply_output_mask(&c, &vec![1.0; c.d_out()]).unwrap();
        prop_assert!(out.max_abs_diff(&delta_weight(&c).unwrap()) < 1e-9);
    }

    #[test]
    fn zero_mask_is_null((c, _, _) in arb_pair()) {
        let masked = apply_rank_mask(&c, &MaskVector::zeros(c.rank())).unwrap();
        prop_assert!(masked.max_abs_diff(&Matrix::zeros(c.d_out(), c.d_in())) < 1e-9);
        let out = apply_output_mask(&c, &vec![0.0; c.d_out()]).unwrap();
        prop_assert!(out.max_abs_diff(&Matrix::zeros(c.d_out(), c.d_in())) < 1e-9);
    }

    #[test]
    fn one_hot_mask_is_outer_product((c, _, _) in arb_pair(), pick in 0usize..64) {
        let k = pick % c.rank();
        let masked = apply_rank_mask(&c, &MaskVector::one_hot(c.rank(), k)).unwrap();
        prop_assert!(masked.max_abs_diff(&outer(&c, k)) < 1e-9);
    }

    #[test]
    fn rank_mask_matches_explicit_sum((c, _, masks) in arb_pair()) {
        let masked = apply_rank_mask(&c, &masks.content).unwrap();
        prop_assert!(masked.max_abs_diff(&masked_sum(&c, masks.content.values())) < 1e-9);
    }

    #[test]
    fn fold_matches_merged_delta((c, s, masks) in arb_pair()) {
        let folded = fold_rank_masks(&c, &s, &masks).unwrap();
        prop_assert_eq!(folded.rank(), c.rank() + s.rank());
        let oracle = masked_sum(&c, masks.content.values()).add(&masked_sum(&s, masks.style.values())).unwrap();
        prop_assert!(delta_weight(&folded).unwrap().max_abs_diff(&oracle) < 1e-9);
        prop_assert!(merged_delta(&c, &s, &masks).unwrap().max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn output_fold_matches_row_scaling(
        (c, s, _) in arb_pair(),
        rows in prop::collection::vec(0.0f64..=1.0, 12),
    ) {
        let n_c = &rows[..c.d_out()];
        let n_s = &rows[6..6 + s.d_out()];
        let folded = fold_output_masks(&c, &s, n_c, n_s).unwrap();
        let dc = delta_weight(&c).unwrap();
        let ds = delta_weight(&s).unwrap();
        let oracle = Matrix::from_fn(c.d_out(), c.d_in(), |i, j| n_c[i] * dc.get(i, j) + n_s[i] * ds.get(i, j)).unwrap();
        prop_assert!(delta_weight(&folded).unwrap().max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn binarize_is_idempotent_and_preserves_rank(values in prop::collection::vec(0.0f64..=1.0, 1..20), t in 0.0f64..1.0) {
        let m = MaskVector::new(values).unwrap();
        let b = binarize(&m, t);
        prop_assert_eq!(binarize(&b, t).clone(), b.clone());
        prop_assert_eq!(mask_rank(&m, t), b.values().iter().filter(|&&v| v == 1.0).count());
    }
}

#[test]
fn mask_length_mismatch_is_rejected() {
    let layer = LoraLayer::unscaled("x", Matrix::identity(2), Matrix::identity(2)).unwrap();
    assert!(apply_rank_mask(&layer, &MaskVector::ones(3)).is_err());
    assert!(apply_output_mask(&layer, &[1.0]).is_err());
}

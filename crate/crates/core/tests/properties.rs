use fedspa_core::pruner::{mask_from_scores, prune_layer, Damping, SaliencyCriterion};
use fedspa_core::{apply_mask, measure_sparsity, Activation, LayeredModel, PruneMask, SparsityTarget, WeightMatrix};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn weights_and_mask() -> impl Strategy<Value = (WeightMatrix, PruneMask)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        (matrix(r, c), prop::collection::vec(any::<bool>(), r * c)).prop_map(move |(w, bits)| {
            (
                WeightMatrix::new(w).unwrap(),
                PruneMask::new(Array2::from_shape_vec((r, c), bits).unwrap()).unwrap(),
            )
        })
    })
}

proptest! {
    #[test]
    fn masking_is_idempotent((w, m) in weights_and_mask()) {
        let once = apply_mask(&w, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once.clone());
        prop_assert!(PruneMask::from_nonzeros(&once).zero_count() >= m.zero_count());
        prop_assert_eq!(measure_sparsity(&m), m.zero_count() as f64 / m.len() as f64);
    }

    #[test]
    fn score_masks_hit_exact_count(scores in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)), s in 0.01f64..0.99) {
        let target = SparsityTarget::new(s).unwrap();
        let m = mask_from_scores(&scores.mapv(f64::abs), target);
        let d = scores.len();
        prop_assert_eq!(m.zero_count(), target.zeros_for(d));
        prop_assert!(m.zero_count() as f64 >= s * d as f64 - 1e-9);
        prop_assert!((m.zero_count() as f64) < s * d as f64 + 1.0);
    }

    #[test]
    fn pruned_layer_has_exact_sparsity(
        (w, x) in (1usize..5, 1usize..6, 1usize..9).prop_flat_map(|(r, c, n)| (matrix(r, c), matrix(c, n))),
        s in 0.05f64..0.95,
        kind in 0usize..3,
    ) {
        let crit = [SaliencyCriterion::magnitude(), SaliencyCriterion::activation_aware(), SaliencyCriterion::obs_diag(Damping::default())][kind];
        let target = SparsityTarget::new(s).unwrap();
        let w = WeightMatrix::new(w).unwrap();
        let r = prune_layer(0, &w, &x, target, &crit, Damping::Absolute(1e-3)).unwrap();
        prop_assert_eq!(r.mask.zero_count(), target.zeros_for(w.len()));
        prop_assert_eq!(apply_mask(&r.weights, &r.mask).unwrap(), r.weights.clone());
    }

    #[test]
    fn identity_model_forward_is_linear(
        (a, b, x, y) in (1usize..5, 1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(i, h, o, n)| (matrix(h, i), matrix(o, h), matrix(i, n), matrix(i, n))),
        alpha in -3.0f64..3.0,
    ) {
        let model = LayeredModel::new("lin", Activation::Identity, vec![WeightMatrix::new(a.clone()).unwrap(), WeightMatrix::new(b.clone()).unwrap()]).unwrap();
        let lhs = model.forward(&(&x + &(&y * alpha))).unwrap();
        let rhs = model.forward(&x).unwrap() + model.forward(&y).unwrap() * alpha;
        let scale = 1.0 + lhs.iter().chain(rhs.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-10 * scale);
        }
        let direct = b.dot(&a).dot(&x);
        for (l, r) in model.forward(&x).unwrap().iter().zip(&direct) {
            prop_assert!((l - r).abs() <= 1e-10 * scale);
        }
    }
}

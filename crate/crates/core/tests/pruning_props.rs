mod support;

use dsee_core::adapter::SparseLowRankUpdate;
use dsee_core::decompose::Support;
use dsee_core::linalg::{DenseMatrix, Rng};
use dsee_core::model::{ProjectionKind, ToyTransformerConfig};
use dsee_core::pruning::{
    apply_magnitude_masks, head_importance, magnitude_mask, prune_ffn, prune_heads, shrink_update,
};
use proptest::prelude::*;
use support::{adapted_model, random_batch};

/// Matrices drawn from a small value alphabet so that ties are frequent.
fn matrices() -> impl Strategy<Value = Vec<(String, DenseMatrix)>> {
    prop::collection::vec((1usize..6, 1usize..6, any::<u64>(), any::<bool>()), 1..5).prop_map(
        |specs| {
            specs
                .into_iter()
                .enumerate()
                .map(|(k, (r, c, seed, coarse))| {
                    let mut rng = Rng::new(seed);
                    let m = DenseMatrix::from_fn(r, c, |_, _| {
                        if coarse {
                            (rng.below(5) as f32 - 2.0) * 0.5
                        } else {
                            rng.normal() as f32
                        }
                    });
                    (format!("m{k}"), m)
                })
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_count_and_global_threshold(mats in matrices(), s in 0.0f64..0.999) {
        let masks = magnitude_mask(&mats, s).unwrap();
        let total: usize = mats.iter().map(|(_, m)| m.len()).sum();
        let masked: usize = masks.iter().map(|(_, m)| m.masked_count()).sum();
        prop_assert_eq!(masked, (s * total as f64 + 1e-9).floor() as usize);

        // Oracle: full lexicographic sort of (|v|, matrix, flat index).
        let mut all: Vec<(f32, usize, usize)> = mats.iter().enumerate()
            .flat_map(|(k, (_, m))| m.as_slice().iter().enumerate().map(move |(p, v)| (v.abs(), k, p)))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (rank, &(_, k, p)) in all.iter().enumerate() {
            prop_assert_eq!(masks[k].1.bits()[p], rank >= masked);
        }

        let mut max_masked = f32::NEG_INFINITY;
        let mut min_kept = f32::INFINITY;
        for ((_, m), (_, mask)) in mats.iter().zip(&masks) {
            for (v, &keep) in m.as_slice().iter().zip(mask.bits()) {
                if keep { min_kept = min_kept.min(v.abs()) } else { max_masked = max_masked.max(v.abs()) }
            }
        }
        prop_assert!(max_masked <= min_kept);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrink_commutes_with_slicing(
        m in 1usize..8, n in 1usize..8, seed in any::<u64>(),
        row_keep in prop::collection::vec(any::<bool>(), 8),
        col_keep in prop::collection::vec(any::<bool>(), 8),
    ) {
        let mut rng = Rng::new(seed);
        let r = 1 + rng.below(m.min(n));
        let amount = rng.below(m * n + 1);
        let picks = rng.sample_indices(m * n, amount);
        let support = Support::new(picks.iter().map(|&p| (p / n, p % n)).collect(), (m, n)).unwrap();
        let mut upd = SparseLowRankUpdate::new(r, support, &mut rng).unwrap();
        upd.u = DenseMatrix::from_fn(m, r, |_, _| rng.normal() as f32);
        upd.s2_values.iter_mut().for_each(|s| *s = rng.normal() as f32);
        let mut rows: Vec<usize> = (0..m).filter(|&i| row_keep[i]).collect();
        let mut cols: Vec<usize> = (0..n).filter(|&j| col_keep[j]).collect();
        if rows.is_empty() { rows.push(m - 1); }
        if cols.is_empty() { cols.push(0); }
        let small = shrink_update(&upd, &rows, &cols).unwrap();
        prop_assert_eq!(small.rank(), r);
        let want = upd.delta_dense().select(&rows, &cols).unwrap();
        prop_assert!(small.delta_dense().max_abs_diff(&want).unwrap() <= 1e-5);
        let all_r: Vec<usize> = (0..m).collect();
        let all_c: Vec<usize> = (0..n).collect();
        prop_assert_eq!(shrink_update(&upd, &all_r, &all_c).unwrap(), upd);
    }
}

#[test]
fn head_pruning_equals_zeroed_gates() {
    for seed in 0..6u64 {
        let cfg = ToyTransformerConfig {
            vocab_size: 9,
            seq_len: 5,
            d_model: 12,
            n_heads: 4,
            d_ff: 16,
            n_layers: 2,
            n_classes: 3,
        };
        for ratio in [0.25, 0.5, 0.75] {
            let model = adapted_model(cfg, seed, 2, 7);
            let pruned = prune_heads(&model, ratio).unwrap();
            let mut zeroed = model.clone();
            let ranking = head_importance(&model.gates());
            let n_remove = (4.0 * ratio) as usize;
            for (layer, order) in zeroed.layers.iter_mut().zip(&ranking) {
                for &h in &order[..n_remove] {
                    layer.gates[h] = 0.0;
                }
            }
            for layer in &pruned.layers {
                assert_eq!(layer.n_heads(), 4 - n_remove);
            }
            let (tokens, _) = random_batch(&cfg, 6, seed);
            let a = pruned.forward_logits(&tokens).unwrap();
            let b = zeroed.forward_logits(&tokens).unwrap();
            assert!(
                a.max_abs_diff(&b).unwrap() <= 1e-5,
                "seed {seed} ratio {ratio}"
            );
            assert_eq!(prune_heads(&pruned, 0.0).unwrap(), pruned);
        }
    }
}

#[test]
fn ffn_pruning_equals_zeroed_units() {
    let cfg = support::tiny_config();
    let model = adapted_model(cfg, 3, 2, 5);
    let pruned = prune_ffn(&model, 0.4).unwrap();
    let mut zeroed = model.clone();
    for (layer, small) in zeroed.layers.iter_mut().zip(&pruned.layers) {
        assert_eq!(small.ffn_width(), cfg.d_ff - 4);
        for u in 0..cfg.d_ff {
            if !small.kept_units.contains(&u) {
                for r in 0..cfg.d_model {
                    layer.ffn_out.set(r, u, 0.0);
                }
            }
        }
    }
    let (tokens, _) = random_batch(&cfg, 5, 1);
    let a = pruned.forward_logits(&tokens).unwrap();
    let b = zeroed.forward_logits(&tokens).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
}

#[test]
fn magnitude_masks_cover_listed_sites() {
    let cfg = support::tiny_config();
    let mut model = adapted_model(cfg, 1, 2, 5);
    for layer in &mut model.layers {
        for kind in ProjectionKind::ALL {
            layer.projection_mut(kind).mask = None;
        }
    }
    apply_magnitude_masks(&mut model, &ProjectionKind::ALL, 0.5, true).unwrap();
    let total: usize = model.layers.len() * 4 * 64;
    let masked: usize = model
        .layers
        .iter()
        .flat_map(|l| {
            ProjectionKind::ALL.map(|k| l.projection(k).mask.as_ref().unwrap().masked_count())
        })
        .sum();
    assert_eq!(masked, total / 2);
    let (tokens, _) = random_batch(&cfg, 2, 0);
    assert!(model.forward_logits(&tokens).is_ok());
}

//! Pruning masks `S₁`: global magnitude masks over merged attention weights
//! and structured removal of heads and FFN units.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::adapter::{SparseLowRankUpdate, UnstructuredMask};
use crate::decompose::Support;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{EncoderLayer, ProjectionKind, ToyTransformer};

/// `⌊x · ratio⌋`, tolerant of products like `0.3 · 10 = 2.9999999999999996`.
pub fn floor_count(x: usize, ratio: f64) -> usize {
    (x as f64 * ratio + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param(format!("{what} {ratio} must be in [0, 1)")));
    }
    Ok(())
}

/// Global magnitude masks: exactly `⌊sparsity · total⌋` entries across all
/// matrices are masked, smallest `|value|` first, ties broken by
/// `(matrix index, row, col)`.
pub fn magnitude_mask(
    matrices: &[(String, DenseMatrix)],
    sparsity: f64,
) -> Result<Vec<(String, UnstructuredMask)>> {
    check_ratio(sparsity, "sparsity")?;
    let total: usize = matrices.iter().map(|(_, m)| m.len()).sum();
    let n_mask = floor_count(total, sparsity);
    let mut bits: Vec<Vec<bool>> = matrices.iter().map(|(_, m)| vec![true; m.len()]).collect();
    if n_mask > 0 {
        let mut order: Vec<(f32, usize, usize)> = matrices
            .iter()
            .enumerate()
            .flat_map(|(k, (_, m))| {
                m.as_slice()
                    .iter()
                    .enumerate()
                    .map(move |(p, v)| (v.abs(), k, p))
            })
            .collect();
        let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if n_mask < order.len() {
            order.select_nth_unstable_by(n_mask - 1, cmp);
        }
        for &(_, k, p) in &order[..n_mask] {
            bits[k][p] = false;
        }
    }
    matrices
        .iter()
        .zip(bits)
        .map(|((name, m), b)| Ok((name.clone(), UnstructuredMask::from_bits(b, m.shape())?)))
        .collect()
}

/// Sort key for magnitude pruning of one site: `W ⊙ S₁ + U V (+ S₂)`.
pub fn pruning_scores(
    layer: &EncoderLayer,
    kind: ProjectionKind,
    include_sparse: bool,
) -> Result<DenseMatrix> {
    let p = layer.projection(kind);
    let mut scores = match &p.mask {
        Some(mask) => mask.apply(&p.weight)?,
        None => p.weight.clone(),
    };
    if let Some(upd) = &p.update {
        scores = scores.add(&upd.u.matmul(&upd.v)?)?;
        if include_sparse {
            scores = scores.add(&upd.sparse_dense())?;
        }
    }
    Ok(scores)
}

/// Replaces the masks of the listed projections in every layer with one
/// global magnitude mask at `sparsity`.
pub fn apply_magnitude_masks(
    model: &mut ToyTransformer,
    kinds: &[ProjectionKind],
    sparsity: f64,
    include_sparse: bool,
) -> Result<()> {
    let mut named = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for &kind in kinds {
            named.push((
                format!("{l}.{kind}"),
                pruning_scores(layer, kind, include_sparse)?,
            ));
        }
    }
    let masks = magnitude_mask(&named, sparsity)?;
    let mut it = masks.into_iter();
    for layer in &mut model.layers {
        for &kind in kinds {
            let (_, mask) = it.next().expect("one mask per site");
            layer.projection_mut(kind).mask = Some(mask);
        }
    }
    Ok(())
}

/// Per-layer head indices, least important first: ascending `|c|`, ties by index.
pub fn head_importance(gates: &[Vec<f32>]) -> Vec<Vec<usize>> {
    gates
        .iter()
        .map(|layer| {
            let mut idx: Vec<usize> = (0..layer.len()).collect();
            idx.sort_by(|&a, &b| layer[a].abs().total_cmp(&layer[b].abs()).then(a.cmp(&b)));
            idx
        })
        .collect()
}

fn check_kept(kept: &[usize], bound: usize, what: &str) -> Result<()> {
    if kept.is_empty() {
        return Err(Error::param(format!("empty kept {what} set")));
    }
    let mut seen = vec![false; bound];
    for &k in kept {
        if k >= bound {
            return Err(Error::param(format!(
                "kept {what} {k} out of bounds {bound}"
            )));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::param(format!("duplicate kept {what} {k}")));
        }
    }
    Ok(())
}

/// Restricts an update to `kept_rows x kept_cols`. Support entries outside
/// the kept block are dropped and the rest re-indexed by position in the
/// kept lists; the rank is unchanged.
pub fn shrink_update(
    upd: &SparseLowRankUpdate,
    kept_rows: &[usize],
    kept_cols: &[usize],
) -> Result<SparseLowRankUpdate> {
    let (m, n) = upd.host_shape();
    check_kept(kept_rows, m, "row")?;
    check_kept(kept_cols, n, "column")?;
    let all_rank: Vec<usize> = (0..upd.rank()).collect();
    let u = upd.u.select(kept_rows, &all_rank)?;
    let v = upd.v.select(&all_rank, kept_cols)?;
    let row_at: HashMap<usize, usize> =
        kept_rows.iter().enumerate().map(|(p, &r)| (r, p)).collect();
    let col_at: HashMap<usize, usize> =
        kept_cols.iter().enumerate().map(|(p, &c)| (c, p)).collect();
    let mut entries: Vec<((usize, usize), f32)> = upd
        .support()
        .indices()
        .iter()
        .zip(&upd.s2_values)
        .filter_map(|(&(i, j), &val)| Some(((*row_at.get(&i)?, *col_at.get(&j)?), val)))
        .collect();
    entries.sort_by_key(|e| e.0);
    let support = Support::new(
        entries.iter().map(|e| e.0).collect(),
        (kept_rows.len(), kept_cols.len()),
    )?;
    SparseLowRankUpdate::from_parts(u, v, support, entries.into_iter().map(|e| e.1).collect())
}

fn slice_projection(
    layer: &mut EncoderLayer,
    kind: ProjectionKind,
    rows: &[usize],
    cols: &[usize],
) -> Result<()> {
    let p = layer.projection_mut(kind);
    p.weight = p.weight.select(rows, cols)?;
    if let Some(mask) = &p.mask {
        p.mask = Some(mask.select(rows, cols)?);
    }
    if let Some(upd) = &p.update {
        p.update = Some(shrink_update(upd, rows, cols)?);
    }
    Ok(())
}

/// Keeps the head slots `kept` (positions into the layer's current heads).
pub fn keep_heads(layer: &mut EncoderLayer, kept: &[usize]) -> Result<()> {
    let h = layer.n_heads();
    check_kept(kept, h, "head")?;
    let width = layer.projection(ProjectionKind::Query).weight.rows();
    let dh = width / h;
    let d = layer.projection(ProjectionKind::Query).weight.cols();
    let slots: Vec<usize> = kept.iter().flat_map(|&s| s * dh..(s + 1) * dh).collect();
    let model_dims: Vec<usize> = (0..d).collect();
    for kind in [
        ProjectionKind::Query,
        ProjectionKind::Key,
        ProjectionKind::Value,
    ] {
        slice_projection(layer, kind, &slots, &model_dims)?;
    }
    slice_projection(layer, ProjectionKind::Output, &model_dims, &slots)?;
    layer.gates = kept.iter().map(|&s| layer.gates[s]).collect();
    layer.kept_heads = kept.iter().map(|&s| layer.kept_heads[s]).collect();
    Ok(())
}

/// Removes the `⌊n_heads · ratio⌋` lowest-`|c|` heads of every layer.
pub fn prune_heads(model: &ToyTransformer, ratio: f64) -> Result<ToyTransformer> {
    check_ratio(ratio, "head ratio")?;
    let mut out = model.clone();
    let ranking = head_importance(&model.gates());
    for (layer, order) in out.layers.iter_mut().zip(ranking) {
        let n_remove = floor_count(order.len(), ratio);
        if n_remove == 0 {
            continue;
        }
        if n_remove >= order.len() {
            return Err(Error::param(format!(
                "ratio {ratio} removes all {} heads of a layer",
                order.len()
            )));
        }
        let mut kept = order[n_remove..].to_vec();
        kept.sort_unstable();
        keep_heads(layer, &kept)?;
    }
    Ok(out)
}

/// Per-unit importance `√(‖W₁[u,:]‖² + ‖W₂[:,u]‖²)`.
pub fn ffn_unit_importance(layer: &EncoderLayer) -> Vec<f64> {
    let w1 = &layer.ffn_in;
    let w2 = &layer.ffn_out;
    (0..w1.rows())
        .map(|u| {
            let a: f64 = w1.row(u).iter().map(|&v| f64::from(v).powi(2)).sum();
            let b: f64 = (0..w2.rows())
                .map(|r| f64::from(w2.get(r, u)).powi(2))
                .sum();
            (a + b).sqrt()
        })
        .collect()
}

/// Removes the `⌊d_ff · ratio⌋` least important intermediate units per layer.
pub fn prune_ffn(model: &ToyTransformer, ratio: f64) -> Result<ToyTransformer> {
    check_ratio(ratio, "FFN ratio")?;
    let mut out = model.clone();
    for layer in &mut out.layers {
        let width = layer.ffn_width();
        let n_remove = floor_count(width, ratio);
        if n_remove == 0 {
            continue;
        }
        let score = ffn_unit_importance(layer);
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let mut kept = order[n_remove..].to_vec();
        kept.sort_unstable();
        let d: Vec<usize> = (0..layer.ffn_out.rows()).collect();
        layer.ffn_in = layer.ffn_in.select(&kept, &d)?;
        layer.ffn_in_bias = kept.iter().map(|&u| layer.ffn_in_bias[u]).collect();
        layer.ffn_out = layer.ffn_out.select(&d, &kept)?;
        layer.kept_units = kept.iter().map(|&u| layer.kept_units[u]).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::model::ToyTransformerConfig;

    fn m(rows: &[&[f32]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn two_by_two_half() {
        let masks = magnitude_mask(&[("a".into(), m(&[&[1.0, -4.0], &[3.0, 2.0]]))], 0.5).unwrap();
        let mask = &masks[0].1;
        assert!(mask.keeps(0, 1) && mask.keeps(1, 0));
        assert!(!mask.keeps(0, 0) && !mask.keeps(1, 1));
    }

    #[test]
    fn zero_sparsity_keeps_all() {
        let masks = magnitude_mask(&[("a".into(), m(&[&[0.0, 1.0]]))], 0.0).unwrap();
        assert_eq!(masks[0].1.masked_count(), 0);
    }

    #[test]
    fn threshold_is_global() {
        let big = DenseMatrix::from_fn(3, 3, |_, _| 10.0);
        let small = DenseMatrix::from_fn(3, 3, |_, _| 0.1);
        let masks = magnitude_mask(&[("big".into(), big), ("small".into(), small)], 0.5).unwrap();
        assert_eq!(masks[0].1.masked_count(), 0);
        assert_eq!(masks[1].1.masked_count(), 9);
    }

    #[test]
    fn ties_prune_earlier_indices() {
        let a = DenseMatrix::from_fn(2, 2, |_, _| 1.0);
        let b = DenseMatrix::from_fn(1, 2, |_, _| 1.0);
        let masks = magnitude_mask(&[("a".into(), a), ("b".into(), b)], 0.5).unwrap();
        assert_eq!(masks[0].1.bits(), &[false, false, false, true]);
        assert_eq!(masks[1].1.bits(), &[true, true]);
    }

    #[test]
    fn sparsity_out_of_range() {
        let a = DenseMatrix::zeros(2, 2);
        assert!(matches!(
            magnitude_mask(&[("a".into(), a.clone())], 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(magnitude_mask(&[("a".into(), a)], -0.1).is_err());
    }

    #[test]
    fn head_rankings() {
        assert_eq!(
            head_importance(&[vec![0.9, 0.1, 0.5, 0.5]]),
            vec![vec![1, 2, 3, 0]]
        );
        assert_eq!(head_importance(&[vec![0.3; 4]]), vec![vec![0, 1, 2, 3]]);
        assert_eq!(head_importance(&[vec![-0.05, 0.2]]), vec![vec![0, 1]]);
    }

    #[test]
    fn shrink_drops_and_rebases() {
        let mut rng = Rng::new(0);
        let support = Support::new(vec![(0, 0), (0, 2), (1, 1), (2, 2)], (3, 3)).unwrap();
        let mut upd = SparseLowRankUpdate::new(1, support, &mut rng).unwrap();
        upd.s2_values = vec![1.0, 2.0, 3.0, 4.0];
        let out = shrink_update(&upd, &[0, 1, 2], &[0, 2]).unwrap();
        assert_eq!(out.support().indices(), &[(0, 0), (0, 1), (2, 1)]);
        assert_eq!(out.s2_values, vec![1.0, 2.0, 4.0]);
        assert_eq!(out.rank(), 1);
        let same = shrink_update(&upd, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(same, upd);
        assert!(shrink_update(&upd, &[], &[0]).is_err());
        assert!(shrink_update(&upd, &[3], &[0]).is_err());
    }

    #[test]
    fn quarter_of_four_heads() {
        let cfg = ToyTransformerConfig {
            n_heads: 4,
            d_model: 16,
            ..ToyTransformerConfig::default()
        };
        let mut model = ToyTransformer::new(cfg, &mut Rng::new(1)).unwrap();
        model.layers[0].gates = vec![0.9, 0.1, 0.5, 0.5];
        let pruned = prune_heads(&model, 0.25).unwrap();
        assert_eq!(pruned.layers[0].kept_heads, vec![0, 2, 3]);
        assert_eq!(pruned.layers[1].kept_heads, vec![1, 2, 3]);
        assert_eq!(
            pruned.layers[0]
                .projection(ProjectionKind::Query)
                .weight
                .shape(),
            (12, 16)
        );
        assert_eq!(
            pruned.layers[0]
                .projection(ProjectionKind::Output)
                .weight
                .shape(),
            (16, 12)
        );
        assert_eq!(prune_heads(&model, 0.0).unwrap(), model);
        assert!(prune_heads(&model, 1.0).is_err());
    }

    #[test]
    fn removing_every_head_is_rejected() {
        let cfg = ToyTransformerConfig {
            n_heads: 1,
            d_model: 8,
            ..ToyTransformerConfig::default()
        };
        let model = ToyTransformer::new(cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(prune_heads(&model, 0.9).unwrap(), model);
        let cfg2 = ToyTransformerConfig { n_heads: 2, ..cfg };
        let model2 = ToyTransformer::new(cfg2, &mut Rng::new(1)).unwrap();
        assert!(prune_heads(&model2, 0.99).is_ok());
    }

    #[test]
    fn floor_count_guards_rounding() {
        assert_eq!(floor_count(10, 0.3), 3);
        assert_eq!(floor_count(4, 0.25), 1);
        assert_eq!(floor_count(4, 0.33), 1);
        assert_eq!(floor_count(7, 0.5), 3);
    }
}

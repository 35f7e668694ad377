//! Independent oracles shared by integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use dsee_core::adapter::{SparseLowRankUpdate, UnstructuredMask};
use dsee_core::decompose::Support;
use dsee_core::linalg::{matmul, DenseMatrix, Rng};
use dsee_core::model::{BackwardOptions, ProjectionKind, ToyTransformer, ToyTransformerConfig};

pub struct Planted {
    pub w: DenseMatrix,
    pub spikes: BTreeSet<(usize, usize)>,
}

/// Rank-`r` Gaussian product plus `count` spikes of `ratio` times the RMS
/// entry of the low-rank part, random signs, distinct positions.
pub fn planted(size: usize, r: usize, count: usize, ratio: f32, seed: u64) -> Planted {
    let mut rng = Rng::new(seed);
    let x = DenseMatrix::from_fn(size, r, |_, _| rng.normal() as f32);
    let y = DenseMatrix::from_fn(r, size, |_, _| rng.normal() as f32);
    let mut w = matmul(&x, &y).unwrap();
    let rms = (w.frobenius_norm() / (size as f64)) as f32;
    let mut spikes = BTreeSet::new();
    for p in rng.sample_indices(size * size, count) {
        let (i, j) = (p / size, p % size);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        w.set(i, j, w.get(i, j) + sign * ratio * rms);
        spikes.insert((i, j));
    }
    Planted { w, spikes }
}

pub fn tiny_config() -> ToyTransformerConfig {
    ToyTransformerConfig {
        vocab_size: 7,
        seq_len: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers: 2,
        n_classes: 3,
    }
}

/// Random model with non-trivial updates, masks and gates on every projection,
/// and randomized norms/biases so that no gradient vanishes by symmetry.
pub fn adapted_model(
    cfg: ToyTransformerConfig,
    seed: u64,
    rank: usize,
    n_keep: usize,
) -> ToyTransformer {
    let mut rng = Rng::new(seed);
    let mut model = ToyTransformer::new(cfg, &mut rng).unwrap();
    model.visit_params_mut(&mut |name, _, values| {
        if name.ends_with("gamma") {
            values
                .iter_mut()
                .for_each(|v| *v = 1.0 + 0.2 * rng.normal() as f32);
        } else if name.ends_with("beta") || name.ends_with("bias") {
            values
                .iter_mut()
                .for_each(|v| *v = 0.1 * rng.normal() as f32);
        }
    });
    for layer in &mut model.layers {
        for g in &mut layer.gates {
            *g = 0.5 + rng.uniform() as f32;
        }
        for kind in ProjectionKind::ALL {
            let p = layer.projection_mut(kind);
            let (m, n) = p.weight.shape();
            let picks = rng.sample_indices(m * n, n_keep);
            let support =
                Support::new(picks.iter().map(|&q| (q / n, q % n)).collect(), (m, n)).unwrap();
            let mut upd = SparseLowRankUpdate::new(rank, support, &mut rng).unwrap();
            upd.u = DenseMatrix::from_fn(m, rank, |_, _| (0.3 * rng.normal()) as f32);
            upd.v = DenseMatrix::from_fn(rank, n, |_, _| (0.3 * rng.normal()) as f32);
            for s in &mut upd.s2_values {
                *s = (0.3 * rng.normal()) as f32;
            }
            let bits = (0..m * n).map(|_| rng.uniform() >= 0.25).collect();
            p.mask = Some(UnstructuredMask::from_bits(bits, (m, n)).unwrap());
            p.update = Some(upd);
        }
    }
    model
}

pub fn random_batch(
    cfg: &ToyTransformerConfig,
    batch: usize,
    seed: u64,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let tokens = (0..batch)
        .map(|_| {
            (0..cfg.seq_len)
                .map(|_| rng.below(cfg.vocab_size))
                .collect()
        })
        .collect();
    let labels = (0..batch).map(|_| rng.below(cfg.n_classes)).collect();
    (tokens, labels)
}

fn f(x: f32) -> f64 {
    f64::from(x)
}

/// `W ⊙ S₁ + U V + S₂` assembled entry by entry.
fn effective_weight(model: &ToyTransformer, layer: usize, kind: ProjectionKind) -> Vec<Vec<f64>> {
    let p = model.layers[layer].projection(kind);
    let (m, n) = p.weight.shape();
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let keep = p.mask.as_ref().is_none_or(|mk| mk.keeps(i, j));
            if keep {
                out[i][j] = f(p.weight.get(i, j));
            }
        }
    }
    if let Some(upd) = &p.update {
        for i in 0..m {
            for j in 0..n {
                for k in 0..upd.rank() {
                    out[i][j] += f(upd.u.get(i, k)) * f(upd.v.get(k, j));
                }
            }
        }
        for (&(i, j), &s) in upd.support().indices().iter().zip(&upd.s2_values) {
            out[i][j] += f(s);
        }
    }
    out
}

fn layer_norm(x: &[f64], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let denom = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|k| (x[k] - mean) / denom * f(gamma[k]) + f(beta[k]))
        .collect()
}

fn apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line forward pass over one sequence. With `skip_attention` the
/// attention sublayer is omitted entirely.
pub fn reference_logits(model: &ToyTransformer, seq: &[usize], skip_attention: bool) -> Vec<f64> {
    let t = seq.len();
    let d = model.config.d_model;
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|p| {
            (0..d)
                .map(|k| {
                    f(model.token_embedding.get(seq[p], k)) + f(model.position_embedding.get(p, k))
                })
                .collect()
        })
        .collect();
    for (l, layer) in model.layers.iter().enumerate() {
        if !skip_attention {
            let [wq, wk, wv, wo] = ProjectionKind::ALL.map(|k| effective_weight(model, l, k));
            let a: Vec<Vec<f64>> = x
                .iter()
                .map(|r| layer_norm(r, &layer.attn_norm.gamma, &layer.attn_norm.beta))
                .collect();
            let q: Vec<Vec<f64>> = a.iter().map(|r| apply(&wq, r)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| apply(&wk, r)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|r| apply(&wv, r)).collect();
            let h = layer.gates.len();
            let dh = wq.len() / h;
            let mut gated = vec![vec![0.0; h * dh]; t];
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..dh).map(|e| q[i][off + e] * k[j][off + e]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for e in 0..dh {
                        let c: f64 = (0..t).map(|j| exps[j] / z * v[j][off + e]).sum();
                        gated[i][off + e] = f(layer.gates[head]) * c;
                    }
                }
            }
            for i in 0..t {
                let o = apply(&wo, &gated[i]);
                for kk in 0..d {
                    x[i][kk] += o[kk];
                }
            }
        }
        let w1: Vec<Vec<f64>> = (0..layer.ffn_in.rows())
            .map(|r| layer.ffn_in.row(r).iter().map(|&v| f(v)).collect())
            .collect();
        let w2: Vec<Vec<f64>> = (0..layer.ffn_out.rows())
            .map(|r| layer.ffn_out.row(r).iter().map(|&v| f(v)).collect())
            .collect();
        for row in x.iter_mut() {
            let b = layer_norm(row, &layer.ffn_norm.gamma, &layer.ffn_norm.beta);
            let hidden: Vec<f64> = apply(&w1, &b)
                .iter()
                .zip(&layer.ffn_in_bias)
                .map(|(v, &bias)| gelu(v + f(bias)))
                .collect();
            let out = apply(&w2, &hidden);
            for kk in 0..d {
                row[kk] += out[kk] + f(layer.ffn_out_bias[kk]);
            }
        }
    }
    let mut pooled = vec![0.0; d];
    for row in &x {
        let n = layer_norm(row, &model.final_norm.gamma, &model.final_norm.beta);
        for kk in 0..d {
            pooled[kk] += n[kk] / t as f64;
        }
    }
    (0..model.config.n_classes)
        .map(|c| {
            f(model.classifier_bias[c])
                + (0..d)
                    .map(|kk| f(model.classifier.get(c, kk)) * pooled[kk])
                    .sum::<f64>()
        })
        .collect()
}

pub struct FdViolation {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences with `eps = 1e-3` on every entry of every tensor,
/// compared at `|a − n| ≤ 1e-6 + 1e-4·max(|a|, |n|)`. Returns the number of
/// entries checked and any violations.
pub fn finite_difference_check(
    model: &ToyTransformer,
    tokens: &[Vec<usize>],
    labels: &[usize],
    lambda: f64,
) -> (usize, Vec<FdViolation>) {
    let opts = BackwardOptions {
        lambda_l1: lambda,
        dense_grads: true,
    };
    let (_, grads) = model.backward(tokens, labels, opts).unwrap();
    let mut names = Vec::new();
    model.visit_params(&mut |name, _, v| names.push((name.to_string(), v.len())));
    let mut checked = 0;
    let mut violations = Vec::new();
    for (name, len) in names {
        let analytic = grads
            .get(&name)
            .unwrap_or_else(|| panic!("missing gradient for {name}"));
        assert_eq!(analytic.len(), len, "gradient shape for {name}");
        for idx in 0..len {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut base = 0.0f32;
            let mut hi = 0.0f32;
            let mut lo = 0.0f32;
            plus.visit_params_mut(&mut |n, _, v| {
                if n == name {
                    base = v[idx];
                    v[idx] = base + 1e-3;
                    hi = v[idx];
                }
            });
            minus.visit_params_mut(&mut |n, _, v| {
                if n == name {
                    v[idx] = base - 1e-3;
                    lo = v[idx];
                }
            });
            let lp = plus.loss(tokens, labels, lambda).unwrap();
            let lm = minus.loss(tokens, labels, lambda).unwrap();
            let numeric = (lp - lm) / (f(hi) - f(lo));
            let a = analytic[idx];
            checked += 1;
            if (a - numeric).abs() > 1e-6 + 1e-4 * a.abs().max(numeric.abs()) {
                violations.push(FdViolation {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, violations)
}

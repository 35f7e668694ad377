//! Trainable-parameter budgets, analytic FLOPs and weight-change histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{ProjectionKind, ToyTransformer, ToyTransformerConfig};

/// Name of the FLOPs convention used by [`estimate_flops`], recorded in reports.
pub const FLOPS_CONVENTION: &str =
    "2 FLOPs per multiply-accumulate; softmax 5, layer norm 5, GELU 8 \
     FLOPs per element; bias, gate and residual adds 1 per element; embeddings excluded; \
     unstructured masks do not reduce FLOPs; adapters add 2*((m+n)*r + card) per token per site";

/// Shape and budget of one adapted weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteShape {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub card: usize,
}

impl SiteShape {
    pub fn trainable(&self) -> u64 {
        ((self.m + self.n) * self.r + self.card) as u64
    }
}

/// `Σ ((m+n)·r + card) + extras`.
pub fn count_trainable(sites: &[SiteShape], extras: u64) -> u64 {
    sites.iter().map(SiteShape::trainable).sum::<u64>() + extras
}

/// Largest rank for which the update stays smaller than the dense matrix:
/// `(m·n − card) / (m + n)`.
pub fn rank_budget_bound(m: usize, n: usize, card: usize) -> f64 {
    (m as f64 * n as f64 - card as f64) / (m + n) as f64
}

/// Architecture dimensions needed for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
}

impl ArchSpec {
    /// 12 layers, hidden size 768, 12 heads, intermediate size 3072, 2 classes.
    pub fn bert_base() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            n_classes: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl From<&ToyTransformerConfig> for ArchSpec {
    fn from(c: &ToyTransformerConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            n_classes: c.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskState {
    Dense,
    /// Irregular sparsity: no FLOPs change.
    Unstructured {
        sparsity: f64,
    },
    /// Surviving head and FFN-unit counts per layer.
    Structured {
        heads: Vec<usize>,
        ffn_units: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub rank: usize,
    /// Sparse entries per site (clipped to the site size).
    pub card: usize,
    /// Projections carrying `U V`.
    pub targets: Vec<ProjectionKind>,
    /// Projections carrying `S₂`.
    pub sparse_targets: Vec<ProjectionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsQuery {
    pub arch: ArchSpec,
    pub seq_len: usize,
    pub batch: usize,
    pub dataset_size: usize,
    pub mask: MaskState,
    pub adapter: Option<AdapterState>,
}

/// `(m, n)` of a projection in a layer with `heads` surviving heads.
pub fn projection_shape(arch: &ArchSpec, heads: usize, kind: ProjectionKind) -> (usize, usize) {
    let inner = heads * arch.head_dim();
    match kind {
        ProjectionKind::Output => (arch.d_model, inner),
        _ => (inner, arch.d_model),
    }
}

fn layer_dims(q: &FlopsQuery, layer: usize) -> Result<(usize, usize)> {
    match &q.mask {
        MaskState::Structured { heads, ffn_units } => {
            let h = *heads
                .get(layer)
                .ok_or_else(|| Error::shape(format!("no head count for layer {layer}")))?;
            let f = *ffn_units
                .get(layer)
                .ok_or_else(|| Error::shape(format!("no FFN width for layer {layer}")))?;
            Ok((h, f))
        }
        _ => Ok((q.arch.n_heads, q.arch.d_ff)),
    }
}

/// FLOPs of one sequence under [`FLOPS_CONVENTION`].
pub fn flops_per_sequence(q: &FlopsQuery) -> Result<u64> {
    let a = &q.arch;
    let t = q.seq_len as u64;
    let d = a.d_model as u64;
    let dh = a.head_dim() as u64;
    let mut total = 0u64;
    for layer in 0..a.n_layers {
        let (heads, units) = layer_dims(q, layer)?;
        let h = heads as u64;
        let f = units as u64;
        let inner = h * dh;
        total += 5 * t * d; // attention layer norm
        total += 3 * 2 * t * d * inner; // Q, K, V
        total += 2 * h * t * t * dh; // scores
        total += 5 * h * t * t; // scaled softmax
        total += 2 * h * t * t * dh; // context
        total += t * inner; // gates
        total += 2 * t * inner * d; // output projection
        total += t * d; // residual
        total += 5 * t * d; // FFN layer norm
        total += 2 * t * d * f + t * f; // W1 + b1
        total += 8 * t * f; // GELU
        total += 2 * t * f * d + t * d; // W2 + b2
        total += t * d; // residual
        if let Some(ad) = &q.adapter {
            for kind in ProjectionKind::ALL {
                let (m, n) = projection_shape(a, heads, kind);
                let r = if ad.targets.contains(&kind) {
                    ad.rank
                } else {
                    0
                };
                let card = if ad.sparse_targets.contains(&kind) {
                    ad.card.min(m * n)
                } else {
                    0
                };
                total += 2 * ((m + n) * r + card) as u64 * t;
            }
        }
    }
    let c = a.n_classes as u64;
    total += 5 * t * d; // final layer norm
    total += t * d; // mean pooling
    total += 2 * d * c + c; // classifier
    Ok(total)
}

/// FLOPs over one pass of `dataset_size` sequences in batches of `batch`
/// (the last partial batch is padded).
pub fn estimate_flops(q: &FlopsQuery) -> Result<u64> {
    if q.batch == 0 || q.seq_len == 0 {
        return Err(Error::param("batch and seq_len must be positive"));
    }
    let sequences = q.dataset_size.div_ceil(q.batch) * q.batch;
    Ok(flops_per_sequence(q)? * sequences as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteBudget {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub card: usize,
    pub masked_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub trainable_params: u64,
    pub total_params: u64,
    /// Masked fraction of the maskable pretrained weights.
    pub pretrained_sparsity: f64,
    pub nonzero_pretrained_weights: u64,
    pub flops_dense: u64,
    pub flops_current: u64,
    pub flops_convention: String,
    pub per_site: Vec<SiteBudget>,
    pub warnings: Vec<String>,
}

/// Warnings for sites whose rank reaches [`rank_budget_bound`].
pub fn rank_warnings(sites: &[SiteBudget]) -> Vec<String> {
    sites
        .iter()
        .filter(|s| s.r as f64 >= rank_budget_bound(s.m, s.n, s.card))
        .map(|s| {
            format!(
                "{}: rank {} is not below the budget bound {:.3}",
                s.name,
                s.r,
                rank_budget_bound(s.m, s.n, s.card)
            )
        })
        .collect()
}

/// Per-site budget of a concrete model, from its stored adapters and masks.
pub fn model_sites(model: &ToyTransformer) -> Vec<SiteBudget> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for kind in ProjectionKind::ALL {
            let p = layer.projection(kind);
            let (m, n) = p.weight.shape();
            let masked_fraction = p.mask.as_ref().map_or(0.0, |mk| mk.sparsity());
            let (r, card) = p
                .update
                .as_ref()
                .map_or((0, 0), |u| (u.rank(), u.support().len()));
            if p.update.is_some() || p.mask.is_some() {
                out.push(SiteBudget {
                    name: format!("layers.{l}.attn.{kind}"),
                    m,
                    n,
                    r,
                    card,
                    masked_fraction,
                });
            }
        }
    }
    out
}

/// Histogram of `after − before` over `bins` equal-width bins on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Two whitespace-separated columns (bin center, count) for gnuplot.
    pub fn to_columns(&self) -> String {
        let mut s = String::from("# center count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let center = 0.5 * (self.edges[i] + self.edges[i + 1]);
            s.push_str(&format!("{center} {c}\n"));
        }
        s
    }
}

/// Entries outside `[lo, hi]` are clamped into the first or last bin.
/// Without a range, the range spans the observed deltas (widened to
/// `[x − 0.5, x + 0.5]` when all deltas equal `x`).
pub fn delta_histogram(
    before: &DenseMatrix,
    after: &DenseMatrix,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if before.shape() != after.shape() {
        return Err(Error::shape(format!(
            "before {:?} vs after {:?}",
            before.shape(),
            after.shape()
        )));
    }
    if bins == 0 {
        return Err(Error::param("bins must be positive"));
    }
    let deltas: Vec<f64> = after
        .as_slice()
        .iter()
        .zip(before.as_slice())
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::param(format!(
                    "invalid histogram range [{lo}, {hi}]"
                )));
            }
            (lo, hi)
        }
        None => {
            let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        }
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for x in deltas {
        let idx = ((x - lo) / width).floor();
        let idx = if idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert_sites(r: usize, card: usize, count: usize) -> Vec<SiteShape> {
        vec![
            SiteShape {
                m: 768,
                n: 768,
                r,
                card
            };
            count
        ]
    }

    #[test]
    fn reference_counts() {
        assert_eq!(count_trainable(&bert_sites(8, 0, 48), 0), 589_824);
        assert_eq!(count_trainable(&bert_sites(4, 0, 48), 0), 294_912);
        assert_eq!(count_trainable(&bert_sites(4, 64, 48), 0), 297_984);
        let mut t3 = bert_sites(16, 64, 24);
        t3.extend(bert_sites(0, 64, 24));
        assert_eq!(count_trainable(&t3, 0), 592_896);
        assert_eq!(
            count_trainable(
                &[SiteShape {
                    m: 5,
                    n: 7,
                    r: 0,
                    card: 0
                }],
                0
            ),
            0
        );
    }

    #[test]
    fn budget_bounds() {
        assert_eq!(rank_budget_bound(768, 768, 0), 384.0);
        assert_eq!(rank_budget_bound(768, 768, 589_824 / 2), 192.0);
        assert_eq!(rank_budget_bound(768, 768, 768 * 768), 0.0);
    }

    fn query(mask: MaskState, adapter: Option<AdapterState>) -> FlopsQuery {
        FlopsQuery {
            arch: ArchSpec::bert_base(),
            seq_len: 128,
            batch: 32,
            dataset_size: 100,
            mask,
            adapter,
        }
    }

    #[test]
    fn structured_zero_equals_dense() {
        let dense = estimate_flops(&query(MaskState::Dense, None)).unwrap();
        let full = MaskState::Structured {
            heads: vec![12; 12],
            ffn_units: vec![3072; 12],
        };
        assert_eq!(estimate_flops(&query(full, None)).unwrap(), dense);
        let unstructured = MaskState::Unstructured { sparsity: 0.5 };
        assert_eq!(estimate_flops(&query(unstructured, None)).unwrap(), dense);
    }

    #[test]
    fn adapter_closed_form() {
        let dense = estimate_flops(&query(MaskState::Dense, None)).unwrap();
        let ad = AdapterState {
            rank: 8,
            card: 64,
            targets: ProjectionKind::ALL.to_vec(),
            sparse_targets: ProjectionKind::ALL.to_vec(),
        };
        let with = estimate_flops(&query(MaskState::Dense, Some(ad))).unwrap();
        let tokens = 128 * 128u64; // ceil(100/32)*32 sequences of 128 tokens
        assert_eq!(with - dense, 48 * 2 * ((768 + 768) * 8 + 64) * tokens);
    }

    #[test]
    fn histogram_cases() {
        let z = DenseMatrix::zeros(2, 3);
        let h = delta_histogram(&z, &z, 5, Some((-1.0, 1.0))).unwrap();
        assert_eq!(h.counts, vec![0, 0, 6, 0, 0]);
        let after = DenseMatrix::from_rows(&[&[-1.0, 0.0, 1.0], &[1.0, 0.0, -1.0]]).unwrap();
        let h = delta_histogram(&z, &after, 3, None).unwrap();
        assert_eq!(h.counts, vec![2, 2, 2]);
        let h = delta_histogram(&z, &after, 2, Some((-0.5, 0.5))).unwrap();
        assert_eq!(h.counts, vec![2, 4]);
        assert_eq!(h.total(), 6);
        assert!(delta_histogram(&z, &DenseMatrix::zeros(3, 2), 2, None).is_err());
    }
}

//! A small pre-norm transformer encoder for classification.
//!
//! Each attention projection can carry a [`SparseLowRankUpdate`] and an
//! [`UnstructuredMask`]; each head's output is scaled by a learnable gate
//! before the output projection. Forward and backward passes run in `f64`
//! over `f32` parameters (see [`compute`]).
//!
//! Layout per layer (row-vector convention, `y = x Wᵀ`):
//!
//! ```text
//! a = LN(x);  q,k,v = proj(a);  ctx_h = softmax(q_h k_hᵀ / √d_h) v_h
//! x = x + proj_o(concat_h(c_h · ctx_h))
//! x = x + W₂ gelu(W₁ LN(x) + b₁) + b₂
//! ```
//!
//! followed by a final LN, mean pooling over positions and a linear
//! classifier.

mod compute;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{merge, SparseLowRankUpdate, UnstructuredMask};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Rng};

pub use compute::BackwardOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            seq_len: 8,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            n_layers: 2,
            n_classes: 4,
        }
    }
}

/// One of the four attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Output,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 4] = [
        ProjectionKind::Query,
        ProjectionKind::Key,
        ProjectionKind::Value,
        ProjectionKind::Output,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ProjectionKind::Query => "q",
            ProjectionKind::Key => "k",
            ProjectionKind::Value => "v",
            ProjectionKind::Output => "o",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(ProjectionKind::Query),
            "k" => Ok(ProjectionKind::Key),
            "v" => Ok(ProjectionKind::Value),
            "o" => Ok(ProjectionKind::Output),
            other => Err(Error::param(format!("unknown projection {other:?}"))),
        }
    }
}

/// A frozen or trainable weight with optional pruning mask and update.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: DenseMatrix,
    pub mask: Option<UnstructuredMask>,
    pub update: Option<SparseLowRankUpdate>,
}

impl Projection {
    pub fn dense(weight: DenseMatrix) -> Self {
        Self {
            weight,
            mask: None,
            update: None,
        }
    }

    /// `W ⊙ S₁ + U V + S₂` with absent parts omitted.
    pub fn merged(&self) -> Result<DenseMatrix> {
        match (&self.update, &self.mask) {
            (Some(upd), mask) => merge(&self.weight, mask.as_ref(), upd),
            (None, Some(mask)) => mask.apply(&self.weight),
            (None, None) => Ok(self.weight.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    /// Q, K, V, O in [`ProjectionKind`] order. Q/K/V are `(h·d_h) x d`, O is `d x (h·d_h)`.
    pub projections: [Projection; 4],
    /// One gate per surviving head.
    pub gates: Vec<f32>,
    /// Original indices of the surviving heads.
    pub kept_heads: Vec<usize>,
    pub ffn_norm: LayerNorm,
    pub ffn_in: DenseMatrix,
    pub ffn_in_bias: Vec<f32>,
    pub ffn_out: DenseMatrix,
    pub ffn_out_bias: Vec<f32>,
    /// Original indices of the surviving intermediate units.
    pub kept_units: Vec<usize>,
}

impl EncoderLayer {
    pub fn projection(&self, kind: ProjectionKind) -> &Projection {
        &self.projections[kind.index()]
    }

    pub fn projection_mut(&mut self, kind: ProjectionKind) -> &mut Projection {
        &mut self.projections[kind.index()]
    }

    pub fn n_heads(&self) -> usize {
        self.gates.len()
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_in_bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: ToyTransformerConfig,
    pub token_embedding: DenseMatrix,
    pub position_embedding: DenseMatrix,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub classifier: DenseMatrix,
    pub classifier_bias: Vec<f32>,
}

/// Trainability class of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pretrained weights: embeddings, norms, projections, FFN.
    Dense,
    Gate,
    AdapterU,
    AdapterV,
    AdapterSparse,
    Classifier,
}

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

pub fn projection_param(layer: usize, kind: ProjectionKind, suffix: &str) -> String {
    format!("layers.{layer}.attn.{}.{suffix}", kind.tag())
}

/// Gradients keyed by parameter name (see [`ToyTransformer::visit_params`]).
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    entries: BTreeMap<String, (ParamGroup, Vec<f64>)>,
}

impl GradientSet {
    pub(crate) fn insert(&mut self, name: String, group: ParamGroup, values: Vec<f64>) {
        self.entries.insert(name, (group, values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|(_, v)| v.as_slice())
    }

    pub fn group(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|(g, _)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &[f64])> {
        self.entries
            .iter()
            .map(|(k, (g, v))| (k.as_str(), *g, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| (rng.normal() * std) as f32)
}

impl ToyTransformer {
    /// Random initialization: unit-variance embeddings, `1/√fan_in` weights,
    /// identity norms, zero biases, gates at 1.
    pub fn new(config: ToyTransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let proj_std = 1.0 / (d as f64).sqrt();
        let token_embedding = gaussian(config.vocab_size, d, 1.0, rng);
        let position_embedding = gaussian(config.seq_len, d, 1.0, rng);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                attn_norm: LayerNorm::identity(d),
                projections: [
                    Projection::dense(gaussian(d, d, proj_std, rng)),
                    Projection::dense(gaussian(d, d, proj_std, rng)),
                    Projection::dense(gaussian(d, d, proj_std, rng)),
                    Projection::dense(gaussian(d, d, proj_std, rng)),
                ],
                gates: vec![1.0; config.n_heads],
                kept_heads: (0..config.n_heads).collect(),
                ffn_norm: LayerNorm::identity(d),
                ffn_in: gaussian(f, d, proj_std, rng),
                ffn_in_bias: vec![0.0; f],
                ffn_out: gaussian(d, f, 1.0 / (f as f64).sqrt(), rng),
                ffn_out_bias: vec![0.0; d],
                kept_units: (0..f).collect(),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::identity(d),
            classifier: gaussian(config.n_classes, d, proj_std, rng),
            classifier_bias: vec![0.0; config.n_classes],
        })
    }

    pub fn gates(&self) -> Vec<Vec<f32>> {
        self.layers.iter().map(|l| l.gates.clone()).collect()
    }

    /// Visits every parameter tensor in a fixed order with its canonical name.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamGroup, &[f32])) {
        use ParamGroup::*;
        f("embed.token", Dense, self.token_embedding.as_slice());
        f("embed.position", Dense, self.position_embedding.as_slice());
        for (l, layer) in self.layers.iter().enumerate() {
            f(
                &layer_param(l, "attn_norm.gamma"),
                Dense,
                &layer.attn_norm.gamma,
            );
            f(
                &layer_param(l, "attn_norm.beta"),
                Dense,
                &layer.attn_norm.beta,
            );
            for kind in ProjectionKind::ALL {
                let p = layer.projection(kind);
                f(
                    &projection_param(l, kind, "weight"),
                    Dense,
                    p.weight.as_slice(),
                );
                if let Some(upd) = &p.update {
                    f(
                        &projection_param(l, kind, "update.u"),
                        AdapterU,
                        upd.u.as_slice(),
                    );
                    f(
                        &projection_param(l, kind, "update.v"),
                        AdapterV,
                        upd.v.as_slice(),
                    );
                    f(
                        &projection_param(l, kind, "update.s2"),
                        AdapterSparse,
                        &upd.s2_values,
                    );
                }
            }
            f(&layer_param(l, "gates"), Gate, &layer.gates);
            f(
                &layer_param(l, "ffn_norm.gamma"),
                Dense,
                &layer.ffn_norm.gamma,
            );
            f(
                &layer_param(l, "ffn_norm.beta"),
                Dense,
                &layer.ffn_norm.beta,
            );
            f(
                &layer_param(l, "ffn.in.weight"),
                Dense,
                layer.ffn_in.as_slice(),
            );
            f(&layer_param(l, "ffn.in.bias"), Dense, &layer.ffn_in_bias);
            f(
                &layer_param(l, "ffn.out.weight"),
                Dense,
                layer.ffn_out.as_slice(),
            );
            f(&layer_param(l, "ffn.out.bias"), Dense, &layer.ffn_out_bias);
        }
        f("final_norm.gamma", Dense, &self.final_norm.gamma);
        f("final_norm.beta", Dense, &self.final_norm.beta);
        f("classifier.weight", Classifier, self.classifier.as_slice());
        f("classifier.bias", Classifier, &self.classifier_bias);
    }

    /// Mutable counterpart of [`visit_params`](Self::visit_params), same order and names.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut [f32])) {
        use ParamGroup::*;
        f("embed.token", Dense, self.token_embedding.as_mut_slice());
        f(
            "embed.position",
            Dense,
            self.position_embedding.as_mut_slice(),
        );
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(
                &layer_param(l, "attn_norm.gamma"),
                Dense,
                &mut layer.attn_norm.gamma,
            );
            f(
                &layer_param(l, "attn_norm.beta"),
                Dense,
                &mut layer.attn_norm.beta,
            );
            for kind in ProjectionKind::ALL {
                let p = layer.projection_mut(kind);
                f(
                    &projection_param(l, kind, "weight"),
                    Dense,
                    p.weight.as_mut_slice(),
                );
                if let Some(upd) = &mut p.update {
                    f(
                        &projection_param(l, kind, "update.u"),
                        AdapterU,
                        upd.u.as_mut_slice(),
                    );
                    f(
                        &projection_param(l, kind, "update.v"),
                        AdapterV,
                        upd.v.as_mut_slice(),
                    );
                    f(
                        &projection_param(l, kind, "update.s2"),
                        AdapterSparse,
                        &mut upd.s2_values,
                    );
                }
            }
            f(&layer_param(l, "gates"), Gate, &mut layer.gates);
            f(
                &layer_param(l, "ffn_norm.gamma"),
                Dense,
                &mut layer.ffn_norm.gamma,
            );
            f(
                &layer_param(l, "ffn_norm.beta"),
                Dense,
                &mut layer.ffn_norm.beta,
            );
            f(
                &layer_param(l, "ffn.in.weight"),
                Dense,
                layer.ffn_in.as_mut_slice(),
            );
            f(
                &layer_param(l, "ffn.in.bias"),
                Dense,
                &mut layer.ffn_in_bias,
            );
            f(
                &layer_param(l, "ffn.out.weight"),
                Dense,
                layer.ffn_out.as_mut_slice(),
            );
            f(
                &layer_param(l, "ffn.out.bias"),
                Dense,
                &mut layer.ffn_out_bias,
            );
        }
        f("final_norm.gamma", Dense, &mut self.final_norm.gamma);
        f("final_norm.beta", Dense, &mut self.final_norm.beta);
        f(
            "classifier.weight",
            Classifier,
            self.classifier.as_mut_slice(),
        );
        f("classifier.bias", Classifier, &mut self.classifier_bias);
    }

    pub fn param_count(&self, groups: &[ParamGroup]) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, g, v| {
            if groups.contains(&g) {
                total += v.len();
            }
        });
        total
    }

    pub fn total_param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, _, v| total += v.len());
        total
    }

    /// Order-sensitive digest of every value in the given groups; used to
    /// check that frozen weights stay untouched.
    pub fn checksum(&self, groups: &[ParamGroup]) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit_params(&mut |name, g, values| {
            if groups.contains(&g) {
                hasher.update(name.as_bytes());
                for v in values {
                    hasher.update(v.to_le_bytes());
                }
            }
        });
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn validate_tokens(&self, tokens: &[Vec<usize>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token batch".into()));
        }
        for (b, seq) in tokens.iter().enumerate() {
            if seq.len() != self.config.seq_len {
                return Err(Error::Input(format!(
                    "sequence {b} has length {}, expected {}",
                    seq.len(),
                    self.config.seq_len
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {t} in sequence {b} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Logits of shape `batch x n_classes`.
    pub fn forward_logits(&self, tokens: &[Vec<usize>]) -> Result<DenseMatrix> {
        self.validate_tokens(tokens)?;
        let logits = compute::forward_logits(self, tokens);
        DenseMatrix::from_f64(
            logits.nrows(),
            logits.ncols(),
            logits.as_slice().expect("standard layout"),
        )
    }

    /// Mean cross-entropy plus `lambda_l1 · Σ|c|` over all gates.
    pub fn loss(&self, tokens: &[Vec<usize>], labels: &[usize], lambda_l1: f64) -> Result<f64> {
        self.validate_tokens(tokens)?;
        self.validate_labels(tokens, labels)?;
        let logits = compute::forward_logits(self, tokens);
        Ok(compute::cross_entropy(&logits, labels) + lambda_l1 * self.gate_l1())
    }

    /// Loss and gradients for every parameter tensor (dense tensors only when
    /// requested in `opts`).
    pub fn backward(
        &self,
        tokens: &[Vec<usize>],
        labels: &[usize],
        opts: BackwardOptions,
    ) -> Result<(f64, GradientSet)> {
        self.validate_tokens(tokens)?;
        self.validate_labels(tokens, labels)?;
        Ok(compute::backward(self, tokens, labels, opts))
    }

    fn validate_labels(&self, tokens: &[Vec<usize>], labels: &[usize]) -> Result<()> {
        if labels.len() != tokens.len() {
            return Err(Error::Input(format!(
                "{} labels for {} sequences",
                labels.len(),
                tokens.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Input(format!(
                "label {l} outside {} classes",
                self.config.n_classes
            )));
        }
        Ok(())
    }

    pub fn gate_l1(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.gates)
            .map(|&c| f64::from(c).abs())
            .sum()
    }

    /// Fraction of correctly classified sequences.
    pub fn accuracy(&self, tokens: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
        let logits = self.forward_logits(tokens)?;
        let correct = (0..logits.rows())
            .filter(|&b| {
                let row = logits.row(b);
                let best = (0..row.len())
                    .max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i)))
                    .expect("at least one class");
                best == labels[b]
            })
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Cross-entropy of softmax(logits) against labels, averaged over rows.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    let arr = ndarray::Array2::from_shape_vec(logits.shape(), logits.to_f64())
        .expect("shape matches data");
    compute::cross_entropy(&arr, labels)
}

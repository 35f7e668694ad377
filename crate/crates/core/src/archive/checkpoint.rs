//! Model checkpoints as tensor archives.
//!
//! Parameters are stored under their [`ToyTransformer::visit_params`] names.
//! Masks are `u8` tensors `…attn.{p}.mask`, supports are `i64` tensors
//! `…attn.{p}.update.support` of shape `[card, 2]`, and surviving head and
//! FFN-unit indices are `i64` tensors `layers.{l}.kept_heads` and
//! `layers.{l}.ffn.kept_units`. The model configuration is stored as JSON in
//! the `config` metadata entry.

use super::{Tensor, TensorArchive};
use crate::adapter::{SparseLowRankUpdate, UnstructuredMask};
use crate::decompose::Support;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{
    layer_param, projection_param, EncoderLayer, LayerNorm, Projection, ProjectionKind,
    ToyTransformer, ToyTransformerConfig,
};

const KIND_KEY: &str = "kind";
const KIND: &str = "dsee-model";

fn matrix(a: &mut TensorArchive, name: String, m: &DenseMatrix) -> Result<()> {
    a.insert(
        name,
        Tensor::from_f32(vec![m.rows(), m.cols()], m.as_slice())?,
    )
}

fn vector(a: &mut TensorArchive, name: String, v: &[f32]) -> Result<()> {
    a.insert(name, Tensor::from_f32(vec![v.len()], v)?)
}

fn indices(a: &mut TensorArchive, name: String, v: &[usize]) -> Result<()> {
    let vals: Vec<i64> = v.iter().map(|&x| x as i64).collect();
    a.insert(name, Tensor::from_i64(vec![v.len()], &vals)?)
}

pub fn model_to_archive(model: &ToyTransformer) -> Result<TensorArchive> {
    let mut a = TensorArchive::new();
    a.meta.insert(KIND_KEY.into(), KIND.into());
    a.meta
        .insert("config".into(), serde_json::to_string(&model.config)?);
    matrix(&mut a, "embed.token".into(), &model.token_embedding)?;
    matrix(&mut a, "embed.position".into(), &model.position_embedding)?;
    for (l, layer) in model.layers.iter().enumerate() {
        vector(
            &mut a,
            layer_param(l, "attn_norm.gamma"),
            &layer.attn_norm.gamma,
        )?;
        vector(
            &mut a,
            layer_param(l, "attn_norm.beta"),
            &layer.attn_norm.beta,
        )?;
        for kind in ProjectionKind::ALL {
            let p = layer.projection(kind);
            matrix(&mut a, projection_param(l, kind, "weight"), &p.weight)?;
            if let Some(mask) = &p.mask {
                let bits: Vec<u8> = mask.bits().iter().map(|&b| u8::from(b)).collect();
                let (m, n) = mask.host_shape();
                a.insert(
                    projection_param(l, kind, "mask"),
                    Tensor::from_u8(vec![m, n], &bits)?,
                )?;
            }
            if let Some(upd) = &p.update {
                matrix(&mut a, projection_param(l, kind, "update.u"), &upd.u)?;
                matrix(&mut a, projection_param(l, kind, "update.v"), &upd.v)?;
                vector(
                    &mut a,
                    projection_param(l, kind, "update.s2"),
                    &upd.s2_values,
                )?;
                let flat: Vec<i64> = upd
                    .support()
                    .indices()
                    .iter()
                    .flat_map(|&(i, j)| [i as i64, j as i64])
                    .collect();
                a.insert(
                    projection_param(l, kind, "update.support"),
                    Tensor::from_i64(vec![upd.support().len(), 2], &flat)?,
                )?;
            }
        }
        vector(&mut a, layer_param(l, "gates"), &layer.gates)?;
        indices(&mut a, layer_param(l, "kept_heads"), &layer.kept_heads)?;
        vector(
            &mut a,
            layer_param(l, "ffn_norm.gamma"),
            &layer.ffn_norm.gamma,
        )?;
        vector(
            &mut a,
            layer_param(l, "ffn_norm.beta"),
            &layer.ffn_norm.beta,
        )?;
        matrix(&mut a, layer_param(l, "ffn.in.weight"), &layer.ffn_in)?;
        vector(&mut a, layer_param(l, "ffn.in.bias"), &layer.ffn_in_bias)?;
        matrix(&mut a, layer_param(l, "ffn.out.weight"), &layer.ffn_out)?;
        vector(&mut a, layer_param(l, "ffn.out.bias"), &layer.ffn_out_bias)?;
        indices(&mut a, layer_param(l, "ffn.kept_units"), &layer.kept_units)?;
    }
    vector(&mut a, "final_norm.gamma".into(), &model.final_norm.gamma)?;
    vector(&mut a, "final_norm.beta".into(), &model.final_norm.beta)?;
    matrix(&mut a, "classifier.weight".into(), &model.classifier)?;
    vector(&mut a, "classifier.bias".into(), &model.classifier_bias)?;
    Ok(a)
}

fn read_matrix(a: &TensorArchive, name: &str) -> Result<DenseMatrix> {
    let t = a.require(name)?;
    match t.shape() {
        &[r, c] => {
            DenseMatrix::new(r, c, t.to_f32()?).map_err(|e| Error::Format(format!("{name}: {e}")))
        }
        other => Err(Error::Format(format!(
            "{name}: expected a matrix, found shape {other:?}"
        ))),
    }
}

fn read_vector(a: &TensorArchive, name: &str, len: usize) -> Result<Vec<f32>> {
    let t = a.require(name)?;
    if t.shape() != [len] {
        return Err(Error::Format(format!(
            "{name}: expected shape [{len}], found {:?}",
            t.shape()
        )));
    }
    t.to_f32()
}

fn read_indices(a: &TensorArchive, name: &str) -> Result<Vec<usize>> {
    a.require(name)?
        .to_i64()?
        .into_iter()
        .map(|v| {
            usize::try_from(v).map_err(|_| Error::Format(format!("{name}: negative index {v}")))
        })
        .collect()
}

fn expect_shape(name: &str, m: &DenseMatrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::Format(format!(
            "{name}: shape {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(())
}

fn read_projection(
    a: &TensorArchive,
    l: usize,
    kind: ProjectionKind,
    shape: (usize, usize),
) -> Result<Projection> {
    let wname = projection_param(l, kind, "weight");
    let weight = read_matrix(a, &wname)?;
    expect_shape(&wname, &weight, shape)?;
    let mask = match a.get(&projection_param(l, kind, "mask")) {
        Some(t) => {
            if t.shape() != [shape.0, shape.1] {
                return Err(Error::Format(format!(
                    "mask of layer {l} {kind} has shape {:?}",
                    t.shape()
                )));
            }
            let bits = t.to_u8()?.into_iter().map(|b| b != 0).collect();
            Some(UnstructuredMask::from_bits(bits, shape)?)
        }
        None => None,
    };
    let update = match a.get(&projection_param(l, kind, "update.u")) {
        Some(_) => {
            let u = read_matrix(a, &projection_param(l, kind, "update.u"))?;
            let v = read_matrix(a, &projection_param(l, kind, "update.v"))?;
            let sname = projection_param(l, kind, "update.support");
            let st = a.require(&sname)?;
            let card = match st.shape() {
                &[c, 2] => c,
                other => return Err(Error::Format(format!("{sname}: shape {other:?}"))),
            };
            let flat = read_indices(a, &sname)?;
            let idx = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            let support =
                Support::new(idx, shape).map_err(|e| Error::Format(format!("{sname}: {e}")))?;
            let s2 = read_vector(a, &projection_param(l, kind, "update.s2"), card)?;
            Some(
                SparseLowRankUpdate::from_parts(u, v, support, s2)
                    .map_err(|e| Error::Format(e.to_string()))?,
            )
        }
        None => None,
    };
    Ok(Projection {
        weight,
        mask,
        update,
    })
}

pub fn model_from_archive(a: &TensorArchive) -> Result<ToyTransformer> {
    if a.meta.get(KIND_KEY).map(String::as_str) != Some(KIND) {
        return Err(Error::Format("archive is not a model checkpoint".into()));
    }
    let config: ToyTransformerConfig = serde_json::from_str(
        a.meta
            .get("config")
            .ok_or_else(|| Error::Format("missing config metadata".into()))?,
    )
    .map_err(|e| Error::Format(format!("config metadata: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    let d = config.d_model;
    let dh = config.head_dim();

    let token_embedding = read_matrix(a, "embed.token")?;
    expect_shape("embed.token", &token_embedding, (config.vocab_size, d))?;
    let position_embedding = read_matrix(a, "embed.position")?;
    expect_shape("embed.position", &position_embedding, (config.seq_len, d))?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let kept_heads = read_indices(a, &layer_param(l, "kept_heads"))?;
        let h = kept_heads.len();
        if h == 0 || kept_heads.iter().any(|&x| x >= config.n_heads) {
            return Err(Error::Format(format!(
                "layer {l}: invalid kept heads {kept_heads:?}"
            )));
        }
        let kept_units = read_indices(a, &layer_param(l, "ffn.kept_units"))?;
        let f = kept_units.len();
        if f == 0 || kept_units.iter().any(|&x| x >= config.d_ff) {
            return Err(Error::Format(format!("layer {l}: invalid kept units")));
        }
        let qkv = (h * dh, d);
        let projections = [
            read_projection(a, l, ProjectionKind::Query, qkv)?,
            read_projection(a, l, ProjectionKind::Key, qkv)?,
            read_projection(a, l, ProjectionKind::Value, qkv)?,
            read_projection(a, l, ProjectionKind::Output, (d, h * dh))?,
        ];
        let ffn_in = read_matrix(a, &layer_param(l, "ffn.in.weight"))?;
        expect_shape("ffn.in.weight", &ffn_in, (f, d))?;
        let ffn_out = read_matrix(a, &layer_param(l, "ffn.out.weight"))?;
        expect_shape("ffn.out.weight", &ffn_out, (d, f))?;
        layers.push(EncoderLayer {
            attn_norm: LayerNorm {
                gamma: read_vector(a, &layer_param(l, "attn_norm.gamma"), d)?,
                beta: read_vector(a, &layer_param(l, "attn_norm.beta"), d)?,
            },
            projections,
            gates: read_vector(a, &layer_param(l, "gates"), h)?,
            kept_heads,
            ffn_norm: LayerNorm {
                gamma: read_vector(a, &layer_param(l, "ffn_norm.gamma"), d)?,
                beta: read_vector(a, &layer_param(l, "ffn_norm.beta"), d)?,
            },
            ffn_in,
            ffn_in_bias: read_vector(a, &layer_param(l, "ffn.in.bias"), f)?,
            ffn_out,
            ffn_out_bias: read_vector(a, &layer_param(l, "ffn.out.bias"), d)?,
            kept_units,
        });
    }
    let classifier = read_matrix(a, "classifier.weight")?;
    expect_shape("classifier.weight", &classifier, (config.n_classes, d))?;
    Ok(ToyTransformer {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_norm: LayerNorm {
            gamma: read_vector(a, "final_norm.gamma", d)?,
            beta: read_vector(a, "final_norm.beta", d)?,
        },
        classifier,
        classifier_bias: read_vector(a, "classifier.bias", config.n_classes)?,
    })
}

/// The deployed model: every projection replaced by `W ⊙ S₁ + U V + S₂`,
/// with masks and updates removed.
pub fn merged_model(model: &ToyTransformer) -> Result<ToyTransformer> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        for p in &mut layer.projections {
            *p = Projection::dense(p.merged()?);
        }
    }
    Ok(out)
}

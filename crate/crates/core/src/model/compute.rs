//! Batched forward and backward passes in `f64`.
//!
//! Tokens of all sequences are stacked into an `(B·T) x d` activation
//! matrix; attention runs per sequence and per surviving head.

use ndarray::{s, Array1, Array2, Axis};

use super::{
    layer_param, projection_param, EncoderLayer, GradientSet, LayerNorm, ParamGroup, Projection,
    ProjectionKind, ToyTransformer,
};
use crate::linalg::DenseMatrix;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Weight of the `Σ|c|` gate penalty.
    pub lambda_l1: f64,
    /// Also return gradients of the [`ParamGroup::Dense`] tensors.
    pub dense_grads: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            lambda_l1: 0.0,
            dense_grads: true,
        }
    }
}

fn to_array(m: &DenseMatrix) -> Array2<f64> {
    Array2::from_shape_vec(m.shape(), m.to_f64()).expect("shape matches data")
}

fn to_vec(v: &[f32]) -> Array1<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn flatten(a: Array2<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct PreparedProjection {
    /// Effective masked weight `W ⊙ S₁`.
    weight: Array2<f64>,
    mask: Option<Vec<bool>>,
    low_rank: Option<(Array2<f64>, Array2<f64>)>,
    sparse: Vec<(usize, usize, f64)>,
}

impl PreparedProjection {
    fn new(p: &Projection) -> Self {
        let mut weight = to_array(&p.weight);
        let mask = p.mask.as_ref().map(|m| m.bits().to_vec());
        if let Some(bits) = &mask {
            for (w, &keep) in weight.iter_mut().zip(bits) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        let (low_rank, sparse) = match &p.update {
            Some(upd) => (
                Some((to_array(&upd.u), to_array(&upd.v))),
                upd.support()
                    .indices()
                    .iter()
                    .zip(&upd.s2_values)
                    .map(|(&(i, j), &v)| (i, j, f64::from(v)))
                    .collect(),
            ),
            None => (None, Vec::new()),
        };
        Self {
            weight,
            mask,
            low_rank,
            sparse,
        }
    }

    /// `y = x (W⊙S₁)ᵀ + (x Vᵀ) Uᵀ + x S₂ᵀ`; also returns `x Vᵀ` for the backward pass.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut y = x.dot(&self.weight.t());
        let mut xv = None;
        if let Some((u, v)) = &self.low_rank {
            let z = x.dot(&v.t());
            y += &z.dot(&u.t());
            xv = Some(z);
        }
        for &(i, j, val) in &self.sparse {
            let xj = x.column(j);
            y.column_mut(i).scaled_add(val, &xj);
        }
        (y, xv)
    }

    fn backward(
        &self,
        x: &Array2<f64>,
        xv: Option<&Array2<f64>>,
        dy: &Array2<f64>,
        dense: bool,
    ) -> (Array2<f64>, ProjectionGrad) {
        let mut dx = dy.dot(&self.weight);
        let mut grad = ProjectionGrad::default();
        if let (Some((u, v)), Some(xv)) = (&self.low_rank, xv) {
            let dz = dy.dot(u);
            grad.u = Some(dy.t().dot(xv));
            grad.v = Some(dz.t().dot(x));
            dx += &dz.dot(v);
        }
        grad.s2 = self
            .sparse
            .iter()
            .map(|&(i, j, val)| {
                let g = dy.column(i).dot(&x.column(j));
                dx.column_mut(j).scaled_add(val, &dy.column(i));
                g
            })
            .collect();
        if dense {
            let mut dw = dy.t().dot(x);
            if let Some(bits) = &self.mask {
                for (g, &keep) in dw.iter_mut().zip(bits) {
                    if !keep {
                        *g = 0.0;
                    }
                }
            }
            grad.weight = Some(dw);
        }
        (dx, grad)
    }
}

#[derive(Default)]
struct ProjectionGrad {
    weight: Option<Array2<f64>>,
    u: Option<Array2<f64>>,
    v: Option<Array2<f64>>,
    s2: Vec<f64>,
}

struct PreparedNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct NormTrace {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl PreparedNorm {
    fn new(n: &LayerNorm) -> Self {
        Self {
            gamma: to_vec(&n.gamma),
            beta: to_vec(&n.beta),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormTrace) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let rv = *r;
            row.mapv_inplace(|v| v * rv);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormTrace { xhat, rstd })
    }

    /// Returns `(dx, dγ, dβ)`.
    fn backward(&self, t: &NormTrace, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let dgamma = (dy * &t.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = t.xhat.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let rs = t.rstd[r];
            let mut out = dx.row_mut(r);
            for k in 0..g.len() {
                out[k] = rs * (g[k] - mean_g - xh[k] * mean_gx);
            }
        }
        (dx, dgamma, dbeta)
    }
}

struct PreparedLayer {
    attn_norm: PreparedNorm,
    projections: [PreparedProjection; 4],
    gates: Vec<f64>,
    ffn_norm: PreparedNorm,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl PreparedLayer {
    fn new(l: &EncoderLayer) -> Self {
        Self {
            attn_norm: PreparedNorm::new(&l.attn_norm),
            projections: [
                PreparedProjection::new(l.projection(ProjectionKind::Query)),
                PreparedProjection::new(l.projection(ProjectionKind::Key)),
                PreparedProjection::new(l.projection(ProjectionKind::Value)),
                PreparedProjection::new(l.projection(ProjectionKind::Output)),
            ],
            gates: l.gates.iter().map(|&c| f64::from(c)).collect(),
            ffn_norm: PreparedNorm::new(&l.ffn_norm),
            w1: to_array(&l.ffn_in),
            b1: to_vec(&l.ffn_in_bias),
            w2: to_array(&l.ffn_out),
            b2: to_vec(&l.ffn_out_bias),
        }
    }

    fn head_dim(&self) -> usize {
        self.projections[0].weight.nrows() / self.gates.len()
    }
}

struct LayerTrace {
    attn_norm: NormTrace,
    qkv: [Array2<f64>; 3],
    qkv_low: [Option<Array2<f64>>; 3],
    /// Softmax probabilities, indexed `seq * heads + head`.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    gated: Array2<f64>,
    o_low: Option<Array2<f64>>,
    ffn_norm: NormTrace,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct Trace {
    layers: Vec<LayerTrace>,
    final_norm: NormTrace,
    pooled: Array2<f64>,
    logits: Array2<f64>,
}

struct Prepared {
    token: Array2<f64>,
    position: Array2<f64>,
    layers: Vec<PreparedLayer>,
    final_norm: PreparedNorm,
    classifier: Array2<f64>,
    classifier_bias: Array1<f64>,
    seq_len: usize,
}

impl Prepared {
    fn new(m: &ToyTransformer) -> Self {
        Self {
            token: to_array(&m.token_embedding),
            position: to_array(&m.position_embedding),
            layers: m.layers.iter().map(PreparedLayer::new).collect(),
            final_norm: PreparedNorm::new(&m.final_norm),
            classifier: to_array(&m.classifier),
            classifier_bias: to_vec(&m.classifier_bias),
            seq_len: m.config.seq_len,
        }
    }

    fn embed(&self, tokens: &[Vec<usize>]) -> Array2<f64> {
        let t = self.seq_len;
        let d = self.token.ncols();
        let mut x = Array2::zeros((tokens.len() * t, d));
        for (b, seq) in tokens.iter().enumerate() {
            for (p, &tok) in seq.iter().enumerate() {
                let mut row = x.row_mut(b * t + p);
                row.assign(&self.token.row(tok));
                row += &self.position.row(p);
            }
        }
        x
    }

    fn forward(&self, tokens: &[Vec<usize>]) -> Trace {
        let batch = tokens.len();
        let t = self.seq_len;
        let mut x = self.embed(tokens);
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.gates.len();
            let dh = layer.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let (a, attn_norm) = layer.attn_norm.forward(&x);
            let (q, q_low) = layer.projections[0].forward(&a);
            let (k, k_low) = layer.projections[1].forward(&a);
            let (v, v_low) = layer.projections[2].forward(&a);
            let mut ctx = Array2::zeros(q.raw_dim());
            let mut probs = Vec::with_capacity(batch * h);
            for b in 0..batch {
                let rows = b * t..(b + 1) * t;
                for head in 0..h {
                    let cols = head * dh..(head + 1) * dh;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![rows.clone(), cols.clone()]);
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    let p = softmax_rows(qh.dot(&kh.t()) * scale);
                    ctx.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                    probs.push(p);
                }
            }
            let mut gated = ctx.clone();
            for head in 0..h {
                gated
                    .slice_mut(s![.., head * dh..(head + 1) * dh])
                    .mapv_inplace(|c| c * layer.gates[head]);
            }
            let (o, o_low) = layer.projections[3].forward(&gated);
            x += &o;
            let (bn, ffn_norm) = layer.ffn_norm.forward(&x);
            let pre = bn.dot(&layer.w1.t()) + &layer.b1;
            let act = pre.mapv(gelu);
            let out = act.dot(&layer.w2.t()) + &layer.b2;
            x += &out;
            traces.push(LayerTrace {
                attn_norm,
                qkv: [q, k, v],
                qkv_low: [q_low, k_low, v_low],
                probs,
                ctx,
                gated,
                o_low,
                ffn_norm,
                pre,
                act,
            });
        }
        let (fin, final_norm) = self.final_norm.forward(&x);
        let mut pooled = Array2::zeros((batch, fin.ncols()));
        for b in 0..batch {
            let mean = fin
                .slice(s![b * t..(b + 1) * t, ..])
                .mean_axis(Axis(0))
                .expect("non-empty sequence");
            pooled.row_mut(b).assign(&mean);
        }
        let logits = pooled.dot(&self.classifier.t()) + &self.classifier_bias;
        Trace {
            layers: traces,
            final_norm,
            pooled,
            logits,
        }
    }
}

fn softmax_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    a
}

pub(crate) fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

pub(crate) fn forward_logits(model: &ToyTransformer, tokens: &[Vec<usize>]) -> Array2<f64> {
    Prepared::new(model).forward(tokens).logits
}

pub(crate) fn backward(
    model: &ToyTransformer,
    tokens: &[Vec<usize>],
    labels: &[usize],
    opts: BackwardOptions,
) -> (f64, GradientSet) {
    let prep = Prepared::new(model);
    let trace = prep.forward(tokens);
    let batch = tokens.len();
    let t = prep.seq_len;
    let dense = opts.dense_grads;
    let mut grads = GradientSet::default();

    let loss = cross_entropy(&trace.logits, labels) + opts.lambda_l1 * model.gate_l1();

    let mut dlogits = softmax_rows(trace.logits.clone());
    for (b, &y) in labels.iter().enumerate() {
        dlogits[[b, y]] -= 1.0;
    }
    dlogits /= batch as f64;
    grads.insert(
        "classifier.weight".into(),
        ParamGroup::Classifier,
        flatten(dlogits.t().dot(&trace.pooled)),
    );
    grads.insert(
        "classifier.bias".into(),
        ParamGroup::Classifier,
        dlogits.sum_axis(Axis(0)).to_vec(),
    );
    let dpooled = dlogits.dot(&prep.classifier);
    let mut dfin = Array2::zeros((batch * t, dpooled.ncols()));
    for b in 0..batch {
        let share = &dpooled.row(b) / t as f64;
        for p in 0..t {
            dfin.row_mut(b * t + p).assign(&share);
        }
    }
    let (mut dx, dg, db) = prep.final_norm.backward(&trace.final_norm, &dfin);
    if dense {
        grads.insert("final_norm.gamma".into(), ParamGroup::Dense, dg.to_vec());
        grads.insert("final_norm.beta".into(), ParamGroup::Dense, db.to_vec());
    }

    for (l, (layer, tr)) in prep.layers.iter().zip(&trace.layers).enumerate().rev() {
        // FFN block.
        let dout = &dx;
        let dact = dout.dot(&layer.w2);
        let dpre = &dact * &tr.pre.mapv(gelu_grad);
        let dbn = dpre.dot(&layer.w1);
        if dense {
            grads.insert(
                layer_param(l, "ffn.out.weight"),
                ParamGroup::Dense,
                flatten(dout.t().dot(&tr.act)),
            );
            grads.insert(
                layer_param(l, "ffn.out.bias"),
                ParamGroup::Dense,
                dout.sum_axis(Axis(0)).to_vec(),
            );
            let bn = &tr.ffn_norm.xhat * &layer.ffn_norm.gamma + &layer.ffn_norm.beta;
            grads.insert(
                layer_param(l, "ffn.in.weight"),
                ParamGroup::Dense,
                flatten(dpre.t().dot(&bn)),
            );
            grads.insert(
                layer_param(l, "ffn.in.bias"),
                ParamGroup::Dense,
                dpre.sum_axis(Axis(0)).to_vec(),
            );
        }
        let (dnorm, dg, db) = layer.ffn_norm.backward(&tr.ffn_norm, &dbn);
        if dense {
            grads.insert(
                layer_param(l, "ffn_norm.gamma"),
                ParamGroup::Dense,
                dg.to_vec(),
            );
            grads.insert(
                layer_param(l, "ffn_norm.beta"),
                ParamGroup::Dense,
                db.to_vec(),
            );
        }
        dx += &dnorm;

        // Attention block.
        let h = layer.gates.len();
        let dh = layer.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (dgated, o_grad) =
            layer.projections[3].backward(&tr.gated, tr.o_low.as_ref(), &dx, dense);
        let mut dctx = dgated.clone();
        let dgates: Vec<f64> = (0..h)
            .map(|head| {
                let cols = head * dh..(head + 1) * dh;
                let g = dgated.slice(s![.., cols.clone()]);
                let c = tr.ctx.slice(s![.., cols.clone()]);
                dctx.slice_mut(s![.., cols])
                    .mapv_inplace(|v| v * layer.gates[head]);
                (&g * &c).sum() + opts.lambda_l1 * sign(layer.gates[head])
            })
            .collect();
        let [q, k, v] = &tr.qkv;
        let mut dq = Array2::zeros(q.raw_dim());
        let mut dk = Array2::zeros(k.raw_dim());
        let mut dv = Array2::zeros(v.raw_dim());
        for b in 0..batch {
            let rows = b * t..(b + 1) * t;
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                let p = &tr.probs[b * h + head];
                let dc = dctx.slice(s![rows.clone(), cols.clone()]);
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let dp = dc.dot(&vh.t());
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.t().dot(&dc));
                let ds = softmax_backward(p, &dp) * scale;
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols])
                    .assign(&ds.t().dot(&qh));
            }
        }
        let a = &tr.attn_norm.xhat * &layer.attn_norm.gamma + &layer.attn_norm.beta;
        let mut da = Array2::zeros(a.raw_dim());
        let mut proj_grads = Vec::with_capacity(4);
        for (idx, dy) in [dq, dk, dv].iter().enumerate() {
            let (d, g) = layer.projections[idx].backward(&a, tr.qkv_low[idx].as_ref(), dy, dense);
            da += &d;
            proj_grads.push(g);
        }
        proj_grads.push(o_grad);
        for (kind, g) in ProjectionKind::ALL.into_iter().zip(proj_grads) {
            if let Some(w) = g.weight {
                grads.insert(
                    projection_param(l, kind, "weight"),
                    ParamGroup::Dense,
                    flatten(w),
                );
            }
            if let (Some(u), Some(v)) = (g.u, g.v) {
                grads.insert(
                    projection_param(l, kind, "update.u"),
                    ParamGroup::AdapterU,
                    flatten(u),
                );
                grads.insert(
                    projection_param(l, kind, "update.v"),
                    ParamGroup::AdapterV,
                    flatten(v),
                );
                grads.insert(
                    projection_param(l, kind, "update.s2"),
                    ParamGroup::AdapterSparse,
                    g.s2,
                );
            }
        }
        grads.insert(layer_param(l, "gates"), ParamGroup::Gate, dgates);
        let (dnorm, dg, db) = layer.attn_norm.backward(&tr.attn_norm, &da);
        if dense {
            grads.insert(
                layer_param(l, "attn_norm.gamma"),
                ParamGroup::Dense,
                dg.to_vec(),
            );
            grads.insert(
                layer_param(l, "attn_norm.beta"),
                ParamGroup::Dense,
                db.to_vec(),
            );
        }
        dx += &dnorm;
    }

    if dense {
        let mut dtok = Array2::<f64>::zeros(prep.token.raw_dim());
        let mut dpos = Array2::<f64>::zeros(prep.position.raw_dim());
        for (b, seq) in tokens.iter().enumerate() {
            for (p, &tok) in seq.iter().enumerate() {
                let g = dx.row(b * t + p);
                let mut tr = dtok.row_mut(tok);
                tr += &g;
                let mut pr = dpos.row_mut(p);
                pr += &g;
            }
        }
        grads.insert("embed.token".into(), ParamGroup::Dense, flatten(dtok));
        grads.insert("embed.position".into(), ParamGroup::Dense, flatten(dpos));
    }
    (loss, grads)
}

/// Subgradient of `|c|`, taking 0 at the origin.
fn sign(c: f64) -> f64 {
    if c > 0.0 {
        1.0
    } else if c < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&prow, |v, &pv| *v -= pv * dot);
    }
    ds
}

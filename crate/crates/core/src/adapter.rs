//! The trainable update `ΔW = U V + S₂` attached to a frozen weight `W`,
//! optional per-entry pruning masks on `W`, and the deployed merge
//! `W ⊙ S₁ + U V + S₂`.
//!
//! `S₂` is stored as values aligned with a frozen [`Support`], so it is zero
//! off the support by construction.

use serde::{Deserialize, Serialize};

use crate::decompose::{select_support, Support, SupportMethod};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Rng};

/// Standard deviation of the Gaussian initialization of `V`.
pub const V_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLowRankUpdate {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub s2_values: Vec<f32>,
    support: Support,
}

impl SparseLowRankUpdate {
    /// Fresh update on a frozen support: `U = 0`, `V ~ N(0, 0.02²)`, `S₂ = 0`.
    pub fn new(rank: usize, support: Support, rng: &mut Rng) -> Result<Self> {
        let (m, n) = support.host_shape();
        if rank == 0 || rank > m.min(n) {
            return Err(Error::param(format!(
                "rank {rank} must be in 1..={} for a {m}x{n} host",
                m.min(n)
            )));
        }
        let v = DenseMatrix::from_fn(rank, n, |_, _| (rng.normal() * V_INIT_STD) as f32);
        Ok(Self {
            u: DenseMatrix::zeros(m, rank),
            v,
            s2_values: vec![0.0; support.len()],
            support,
        })
    }

    /// Reassembles an update from stored parts, checking shape consistency.
    pub fn from_parts(
        u: DenseMatrix,
        v: DenseMatrix,
        support: Support,
        s2_values: Vec<f32>,
    ) -> Result<Self> {
        let (m, n) = support.host_shape();
        if u.rows() != m || v.cols() != n || u.cols() != v.rows() {
            return Err(Error::shape(format!(
                "factors {:?} x {:?} do not fit a {m}x{n} host",
                u.shape(),
                v.shape()
            )));
        }
        if s2_values.len() != support.len() {
            return Err(Error::shape(format!(
                "{} sparse values for a support of {}",
                s2_values.len(),
                support.len()
            )));
        }
        if s2_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite sparse value".into()));
        }
        Ok(Self {
            u,
            v,
            s2_values,
            support,
        })
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn host_shape(&self) -> (usize, usize) {
        self.support.host_shape()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `(m + n) r + card(Ω)`: the number of stored trainable values.
    pub fn trainable_count(&self) -> usize {
        self.u.len() + self.v.len() + self.s2_values.len()
    }

    /// Dense `S₂`.
    pub fn sparse_dense(&self) -> DenseMatrix {
        let (m, n) = self.host_shape();
        let mut out = DenseMatrix::zeros(m, n);
        for (&(i, j), &val) in self.support.indices().iter().zip(&self.s2_values) {
            out.set(i, j, val);
        }
        out
    }

    /// Dense `U V + S₂`.
    pub fn delta_dense(&self) -> DenseMatrix {
        let mut out = self
            .u
            .matmul(&self.v)
            .expect("factor shapes checked at construction");
        for (&(i, j), &val) in self.support.indices().iter().zip(&self.s2_values) {
            out.set(i, j, out.get(i, j) + val);
        }
        out
    }
}

/// Builds an update for `w`: support chosen by `method`, then zero-valued
/// `U` and `S₂` with Gaussian `V`.
pub fn init_update(
    w: &DenseMatrix,
    r: usize,
    n_keep: usize,
    method: SupportMethod,
    rng: &mut Rng,
) -> Result<SparseLowRankUpdate> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::param(format!(
            "rank {r} must be in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let support = select_support(w, method, n_keep, r, rng)?;
    SparseLowRankUpdate::new(r, support, rng)
}

/// Per-entry keep mask over a weight matrix (`true` = kept).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnstructuredMask {
    bits: Vec<bool>,
    host_shape: (usize, usize),
}

impl UnstructuredMask {
    pub fn all_ones(host_shape: (usize, usize)) -> Self {
        Self {
            bits: vec![true; host_shape.0 * host_shape.1],
            host_shape,
        }
    }

    pub fn from_bits(bits: Vec<bool>, host_shape: (usize, usize)) -> Result<Self> {
        if bits.len() != host_shape.0 * host_shape.1 {
            return Err(Error::shape(format!(
                "{} mask bits for a {}x{} host",
                bits.len(),
                host_shape.0,
                host_shape.1
            )));
        }
        Ok(Self { bits, host_shape })
    }

    pub fn host_shape(&self) -> (usize, usize) {
        self.host_shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn keeps(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.host_shape.1 + col]
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.len() - self.kept_count()
    }

    pub fn sparsity(&self) -> f64 {
        self.masked_count() as f64 / self.bits.len() as f64
    }

    /// `W ⊙ S₁`.
    pub fn apply(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.shape() != self.host_shape {
            return Err(Error::shape(format!(
                "mask {:?} on matrix {:?}",
                self.host_shape,
                w.shape()
            )));
        }
        let data = w
            .as_slice()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        DenseMatrix::new(w.rows(), w.cols(), data)
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let (m, n) = self.host_shape;
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(Error::shape("mask select: index out of bounds"));
        }
        let bits = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| self.bits[r * n + c]))
            .collect();
        Ok(Self {
            bits,
            host_shape: (rows.len(), cols.len()),
        })
    }
}

/// Keeps the entries of `values` on `support` and zeroes the rest.
pub fn project_onto_support(values: &DenseMatrix, support: &Support) -> Result<DenseMatrix> {
    if values.shape() != support.host_shape() {
        return Err(Error::shape(format!(
            "values {:?} vs support host {:?}",
            values.shape(),
            support.host_shape()
        )));
    }
    let (m, n) = values.shape();
    let mut out = DenseMatrix::zeros(m, n);
    for &(i, j) in support.indices() {
        out.set(i, j, values.get(i, j));
    }
    Ok(out)
}

fn check_host(
    w: &DenseMatrix,
    mask: Option<&UnstructuredMask>,
    upd: &SparseLowRankUpdate,
) -> Result<()> {
    if w.shape() != upd.host_shape() {
        return Err(Error::shape(format!(
            "weight {:?} vs update host {:?}",
            w.shape(),
            upd.host_shape()
        )));
    }
    if let Some(mask) = mask {
        if mask.host_shape() != w.shape() {
            return Err(Error::shape(format!(
                "mask {:?} vs weight {:?}",
                mask.host_shape(),
                w.shape()
            )));
        }
    }
    Ok(())
}

/// `(W ⊙ S₁) x + U (V x) + S₂ x` for a column batch `x` of shape `n x b`.
///
/// The low-rank term is evaluated as `U (V x)` and the sparse term directly
/// from the coordinate list; neither `U V` nor dense `S₂` is formed.
pub fn forward(
    x: &DenseMatrix,
    w: &DenseMatrix,
    mask: Option<&UnstructuredMask>,
    upd: &SparseLowRankUpdate,
) -> Result<DenseMatrix> {
    check_host(w, mask, upd)?;
    let (m, n) = w.shape();
    if x.rows() != n {
        return Err(Error::shape(format!(
            "input has {} rows, weight expects {n}",
            x.rows()
        )));
    }
    let b = x.cols();
    let mut y = vec![0.0f64; m * b];

    for i in 0..m {
        let out = &mut y[i * b..(i + 1) * b];
        for (j, &wij) in w.row(i).iter().enumerate() {
            if wij == 0.0 || mask.is_some_and(|mk| !mk.keeps(i, j)) {
                continue;
            }
            let wij = f64::from(wij);
            out.iter_mut()
                .zip(x.row(j))
                .for_each(|(o, &xv)| *o += wij * f64::from(xv));
        }
    }

    let vx = upd.v.matmul(x)?;
    let uvx = upd.u.matmul(&vx)?;
    y.iter_mut()
        .zip(uvx.as_slice())
        .for_each(|(o, &v)| *o += f64::from(v));

    for (&(i, j), &val) in upd.support().indices().iter().zip(&upd.s2_values) {
        let val = f64::from(val);
        let out = &mut y[i * b..(i + 1) * b];
        out.iter_mut()
            .zip(x.row(j))
            .for_each(|(o, &xv)| *o += val * f64::from(xv));
    }
    DenseMatrix::from_f64(m, b, &y)
}

/// Deployed weight `W ⊙ S₁ + U V + S₂`.
pub fn merge(
    w: &DenseMatrix,
    mask: Option<&UnstructuredMask>,
    upd: &SparseLowRankUpdate,
) -> Result<DenseMatrix> {
    check_host(w, mask, upd)?;
    let base = match mask {
        Some(mask) => mask.apply(w)?,
        None => w.clone(),
    };
    base.add(&upd.delta_dense())
}

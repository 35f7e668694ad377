//! Orthonormalization and randomized rank-r factorization.
//!
//! The factorization is a randomized range finder with a few steps of
//! subspace (power) iteration: sketch `Y = A Ω` with a Gaussian `Ω` of width
//! `r + OVERSAMPLE`, orthonormalize, project `B = Qᵀ A`, and truncate to the
//! top `r` directions of `B` through the eigendecomposition of the small
//! Gram matrix `B Bᵀ`. The returned pair satisfies `u v = Q Eᵣ Eᵣᵀ Qᵀ A`.

use super::matrix::DenseMatrix;
use super::rng::Rng;
use crate::error::{Error, Result};

/// Columns below this norm after projection are rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Extra sketch columns beyond the target rank.
pub const OVERSAMPLE: usize = 5;

/// Gram-Schmidt on a set of columns, two passes of projection per column.
///
/// With `strict`, a column whose norm after projection falls below
/// [`RANK_TOLERANCE`] is an error. Otherwise such columns become zero vectors,
/// which keeps the span correct for rank-deficient sketches.
fn gram_schmidt(cols: &mut [Vec<f64>], strict: bool) -> Result<()> {
    let scale = cols
        .iter()
        .map(|c| norm(c))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let proj = dot(q, col);
                if proj != 0.0 {
                    col.iter_mut().zip(q).for_each(|(c, &qv)| *c -= proj * qv);
                }
            }
        }
        let nrm = norm(col);
        let degenerate = if strict {
            nrm < RANK_TOLERANCE
        } else {
            nrm <= 1e-12 * scale
        };
        if degenerate {
            if strict {
                return Err(Error::Degenerate(format!(
                    "column {j} is numerically dependent (residual norm {nrm:e})"
                )));
            }
            col.iter_mut().for_each(|c| *c = 0.0);
        } else {
            col.iter_mut().for_each(|c| *c /= nrm);
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis for the column span of `b` (modified Gram-Schmidt with a
/// re-orthogonalization pass, computed in `f64`).
pub fn orthonormalize(b: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, k) = b.shape();
    if m < k {
        return Err(Error::shape(format!(
            "orthonormalize needs rows >= cols, got {m}x{k}"
        )));
    }
    let mut cols = columns_of(b);
    gram_schmidt(&mut cols, true)?;
    from_columns(m, &cols)
}

fn columns_of(b: &DenseMatrix) -> Vec<Vec<f64>> {
    let (m, k) = b.shape();
    (0..k)
        .map(|j| (0..m).map(|i| f64::from(b.get(i, j))).collect())
        .collect()
}

fn from_columns(m: usize, cols: &[Vec<f64>]) -> Result<DenseMatrix> {
    let k = cols.len();
    let mut data = vec![0.0f64; m * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * k + j] = v;
        }
    }
    DenseMatrix::from_f64(m, k, &data)
}

/// `A x` for each column `x`; `a` is row-major `m x n`.
fn apply(a: &[f64], m: usize, n: usize, cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cols.iter()
        .map(|x| (0..m).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect())
        .collect()
}

/// `Aᵀ y` for each column `y`.
fn apply_transpose(a: &[f64], m: usize, n: usize, cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cols.iter()
        .map(|y| {
            let mut out = vec![0.0; n];
            for i in 0..m {
                let yi = y[i];
                if yi == 0.0 {
                    continue;
                }
                out.iter_mut()
                    .zip(&a[i * n..(i + 1) * n])
                    .for_each(|(o, &aij)| *o += yi * aij);
            }
            out
        })
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric `k x k` matrix (row-major).
///
/// Returns eigenvalues in descending order with eigenvectors as columns
/// (`vecs[i * k + j]` is component `i` of eigenvector `j`). Equal eigenvalues
/// keep their original diagonal order.
fn symmetric_eigen(mat: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j] * a[i * k + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * k + p];
                let aqq = a[q * k + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let arp = a[r * k + p];
                    let arq = a[r * k + q];
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let apr = a[p * k + r];
                    let aqr = a[q * k + r];
                    a[p * k + r] = c * apr - s * aqr;
                    a[q * k + r] = s * apr + c * aqr;
                }
                for r in 0..k {
                    let vrp = v[r * k + p];
                    let vrq = v[r * k + q];
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| a[j * k + j].total_cmp(&a[i * k + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * k + i]).collect();
    let mut vecs = vec![0.0; k * k];
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..k {
            vecs[i * k + new_j] = v[i * k + old_j];
        }
    }
    (values, vecs)
}

/// Rank-`r` factors `(u, v)` with `u` of shape `m x r` and `v` of shape
/// `r x n` such that `u v` approximates `a`.
///
/// `u` has orthonormal (or zero) columns. For inputs of exact rank at most
/// `r`, `u v` reproduces `a` to rounding error. Deterministic for a given
/// `rng` state.
pub fn randomized_low_rank(
    a: &DenseMatrix,
    r: usize,
    power_iters: usize,
    rng: &mut Rng,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, n) = a.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::param(format!(
            "rank {r} must be in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let k = (r + OVERSAMPLE).min(m.min(n));
    let a64 = a.to_f64();

    let omega: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.normal()).collect())
        .collect();
    let mut y = apply(&a64, m, n, &omega);
    for _ in 0..power_iters {
        gram_schmidt(&mut y, false)?;
        let mut z = apply_transpose(&a64, m, n, &y);
        gram_schmidt(&mut z, false)?;
        y = apply(&a64, m, n, &z);
    }
    gram_schmidt(&mut y, false)?;
    let q = y;

    // B = Qᵀ A, stored as k rows of length n.
    let b = apply_transpose(&a64, m, n, &q);
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let g = dot(&b[i], &b[j]);
            gram[i * k + j] = g;
            gram[j * k + i] = g;
        }
    }
    let (_values, vecs) = symmetric_eigen(&gram, k);

    let mut u = vec![0.0; m * r];
    let mut v = vec![0.0; r * n];
    for t in 0..r {
        for (i, qi) in q.iter().enumerate() {
            let e = vecs[i * k + t];
            if e == 0.0 {
                continue;
            }
            for row in 0..m {
                u[row * r + t] += qi[row] * e;
            }
            for col in 0..n {
                v[t * n + col] += e * b[i][col];
            }
        }
    }
    Ok((
        DenseMatrix::from_f64(m, r, &u)?,
        DenseMatrix::from_f64(r, n, &v)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;

    fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.normal() as f32)
    }

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        let qtq = matmul(&q.transpose(), q).unwrap();
        qtq.max_abs_diff(&DenseMatrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn identity_is_fixed_point() {
        let q = orthonormalize(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(q, DenseMatrix::identity(3));
    }

    #[test]
    fn single_column_normalizes() {
        let b = DenseMatrix::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let q = orthonormalize(&b).unwrap();
        assert!((q.get(0, 0) - 0.6).abs() < 1e-7);
        assert!((q.get(1, 0) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn random_tall_matrix_is_orthonormalized() {
        let mut rng = Rng::new(3);
        let b = gaussian(64, 8, &mut rng);
        let q = orthonormalize(&b).unwrap();
        assert!(orthonormality_error(&q) < 1e-5);
        // span(Q) = span(B): projecting B onto Q loses nothing.
        let proj = matmul(&q, &matmul(&q.transpose(), &b).unwrap()).unwrap();
        assert!(proj.max_abs_diff(&b).unwrap() < 1e-4);
    }

    #[test]
    fn dependent_columns_are_degenerate() {
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]).unwrap();
        assert!(matches!(orthonormalize(&b), Err(Error::Degenerate(_))));
        let z = DenseMatrix::zeros(4, 1);
        assert!(matches!(orthonormalize(&z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = [4.0, 1.0, 0.5, 1.0, 3.0, 0.25, 0.5, 0.25, 1.0];
        let (vals, vecs) = symmetric_eigen(&m, 3);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for j in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|p| m[i * 3 + p] * vecs[p * 3 + j]).sum();
                assert!((av - vals[j] * vecs[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix_gives_zero_factors() {
        let a = DenseMatrix::zeros(8, 8);
        let (u, v) = randomized_low_rank(&a, 2, 2, &mut Rng::new(0)).unwrap();
        assert_eq!(matmul(&u, &v).unwrap(), a);
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = Rng::new(11);
        let x: Vec<f32> = (0..20).map(|_| rng.normal() as f32).collect();
        let y: Vec<f32> = (0..15).map(|_| rng.normal() as f32).collect();
        let a = DenseMatrix::from_fn(20, 15, |i, j| x[i] * y[j]);
        let (u, v) = randomized_low_rank(&a, 1, 2, &mut rng).unwrap();
        let err = matmul(&u, &v).unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err / a.frobenius_norm() <= 1e-5, "relative error {err}");
    }

    #[test]
    fn rank_out_of_range() {
        let a = DenseMatrix::zeros(4, 3);
        assert!(matches!(
            randomized_low_rank(&a, 4, 0, &mut Rng::new(0)),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            randomized_low_rank(&a, 0, 0, &mut Rng::new(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gaussian(30, 20, &mut Rng::new(5));
        let (u1, v1) = randomized_low_rank(&a, 3, 2, &mut Rng::new(9)).unwrap();
        let (u2, v2) = randomized_low_rank(&a, 3, 2, &mut Rng::new(9)).unwrap();
        assert_eq!(u1, u2);
        assert_eq!(v1, v2);
    }
}

//! Sparse-plus-low-rank decomposition `W ≈ U V + S` with `card(S) ≤ c`, and
//! extraction of the frozen support used by the sparse update term.
//!
//! The solver alternates two block minimizations of `‖W − U V − S‖_F`:
//! a randomized rank-`r` fit of `W − S`, then hard thresholding of
//! `W − U V` to its `c` largest-magnitude entries. A low-rank candidate is
//! only accepted when it does not increase the residual, so the residual
//! trace is monotone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, randomized_low_rank, DenseMatrix, Rng};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const POWER_ITERS: usize = 2;

/// Sorted, duplicate-free set of `(row, col)` positions inside a host matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    indices: Vec<(usize, usize)>,
    host_shape: (usize, usize),
}

impl Support {
    /// Sorts the indices; rejects duplicates and out-of-bounds positions.
    pub fn new(mut indices: Vec<(usize, usize)>, host_shape: (usize, usize)) -> Result<Self> {
        let (m, n) = host_shape;
        if let Some(&(r, c)) = indices.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::shape(format!(
                "support index ({r}, {c}) outside {m}x{n}"
            )));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate support index".into()));
        }
        Ok(Self {
            indices,
            host_shape,
        })
    }

    pub fn empty(host_shape: (usize, usize)) -> Self {
        Self {
            indices: Vec::new(),
            host_shape,
        }
    }

    pub fn full(host_shape: (usize, usize)) -> Self {
        let (m, n) = host_shape;
        Self {
            indices: (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
            host_shape,
        }
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn host_shape(&self) -> (usize, usize) {
        self.host_shape
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.indices.binary_search(&(row, col)).is_ok()
    }

    /// Position of `(row, col)` in the sorted index list.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        self.indices.binary_search(&(row, col)).ok()
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub s: DenseMatrix,
    /// Frobenius norm of `W − U V − S` after each iteration.
    pub residual_history: Vec<f64>,
}

impl DecompositionResult {
    pub fn relative_residual(&self, w: &DenseMatrix) -> f64 {
        let last = self.residual_history.last().copied().unwrap_or(0.0);
        last / w.frobenius_norm().max(1e-12)
    }
}

/// Positions of the `n_keep` largest-magnitude entries, ties broken toward the
/// lexicographically smaller `(row, col)`.
fn top_magnitude(values: &[f32], cols: usize, n_keep: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let by_magnitude =
        |&a: &usize, &b: &usize| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b));
    if n_keep < order.len() && n_keep > 0 {
        order.select_nth_unstable_by(n_keep - 1, by_magnitude);
    }
    order.truncate(n_keep);
    order.into_iter().map(|p| (p / cols, p % cols)).collect()
}

fn hard_threshold(residual: &DenseMatrix, c: usize) -> DenseMatrix {
    let (m, n) = residual.shape();
    let mut s = DenseMatrix::zeros(m, n);
    for (i, j) in top_magnitude(residual.as_slice(), n, c) {
        s.set(i, j, residual.get(i, j));
    }
    s
}

fn residual_norm(w: &DenseMatrix, low_rank: &DenseMatrix, s: &DenseMatrix) -> f64 {
    w.as_slice()
        .iter()
        .zip(low_rank.as_slice())
        .zip(s.as_slice())
        .map(|((&w, &l), &s)| {
            let r = f64::from(w) - f64::from(l) - f64::from(s);
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Decomposes `w` into a rank-`r` product plus a sparse matrix with at most
/// `c` non-zeros.
///
/// Stops when `|res_t − res_{t−1}| / max(res_{t−1}, 1e-12) < tol` (with
/// `res_0 = ‖w‖_F`), when the residual is exactly zero, or after `max_iter`
/// iterations.
pub fn solve_slr(
    w: &DenseMatrix,
    r: usize,
    c: usize,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<DecompositionResult> {
    let (m, n) = w.shape();
    if w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::param(format!(
            "rank {r} must be in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    if c > m * n {
        return Err(Error::param(format!(
            "cardinality {c} exceeds the {} entries of the matrix",
            m * n
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::param(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::param("max_iter must be positive"));
    }

    let mut u = DenseMatrix::zeros(m, r);
    let mut v = DenseMatrix::zeros(r, n);
    let mut low_rank = DenseMatrix::zeros(m, n);
    let mut s = DenseMatrix::zeros(m, n);
    let mut previous = w.frobenius_norm();
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let target = w.sub(&s)?;
        let (u_new, v_new) = randomized_low_rank(&target, r, POWER_ITERS, rng)?;
        let candidate = matmul(&u_new, &v_new)?;
        let zero = DenseMatrix::zeros(m, n);
        if residual_norm(&target, &candidate, &zero) <= residual_norm(&target, &low_rank, &zero) {
            u = u_new;
            v = v_new;
            low_rank = candidate;
        }

        s = hard_threshold(&w.sub(&low_rank)?, c);
        let res = residual_norm(w, &low_rank, &s);
        history.push(res);
        if res == 0.0 || (res - previous).abs() / previous.max(1e-12) < tol {
            break;
        }
        previous = res;
    }

    Ok(DecompositionResult {
        u,
        v,
        s,
        residual_history: history,
    })
}

/// Indices of the `n_keep` largest-magnitude entries of `s`.
pub fn extract_support(s: &DenseMatrix, n_keep: usize) -> Result<Support> {
    let (m, n) = s.shape();
    if n_keep > m * n {
        return Err(Error::param(format!(
            "cannot keep {n_keep} of {} entries",
            m * n
        )));
    }
    Support::new(top_magnitude(s.as_slice(), n, n_keep), (m, n))
}

/// How the support of the sparse update term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SupportMethod {
    /// Sparse part of the sparse-plus-low-rank decomposition of `W`.
    #[default]
    Decompose,
    /// Largest-magnitude entries of `W` itself.
    Magnitude,
    /// Uniformly random positions.
    Random,
}

impl SupportMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SupportMethod::Decompose => "decompose",
            SupportMethod::Magnitude => "magnitude",
            SupportMethod::Random => "random",
        }
    }
}

impl fmt::Display for SupportMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SupportMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decompose" => Ok(SupportMethod::Decompose),
            "magnitude" => Ok(SupportMethod::Magnitude),
            "random" => Ok(SupportMethod::Random),
            other => Err(Error::param(format!(
                "unknown support method {other:?} (expected decompose, magnitude or random)"
            ))),
        }
    }
}

pub fn select_support(
    w: &DenseMatrix,
    method: SupportMethod,
    n_keep: usize,
    r: usize,
    rng: &mut Rng,
) -> Result<Support> {
    let (m, n) = w.shape();
    if n_keep > m * n {
        return Err(Error::param(format!(
            "cannot keep {n_keep} of {} entries",
            m * n
        )));
    }
    match method {
        SupportMethod::Decompose => {
            let result = solve_slr(w, r, n_keep, DEFAULT_TOL, DEFAULT_MAX_ITER, rng)?;
            extract_support(&result.s, n_keep)
        }
        SupportMethod::Magnitude => extract_support(w, n_keep),
        SupportMethod::Random => {
            let picks = rng.sample_indices(m * n, n_keep);
            Support::new(picks.into_iter().map(|p| (p / n, p % n)).collect(), (m, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn support_validation() {
        let s = Support::new(vec![(1, 0), (0, 1)], (2, 2)).unwrap();
        assert_eq!(s.indices(), &[(0, 1), (1, 0)]);
        assert!(s.contains(1, 0) && !s.contains(1, 1));
        assert!(matches!(
            Support::new(vec![(2, 0)], (2, 2)),
            Err(Error::Shape(_))
        ));
        assert!(Support::new(vec![(0, 0), (0, 0)], (2, 2)).is_err());
    }

    #[test]
    fn extract_single_max() {
        let s = extract_support(&m(&[&[0.0, 5.0], &[-7.0, 0.0]]), 1).unwrap();
        assert_eq!(s.indices(), &[(1, 0)]);
    }

    #[test]
    fn extract_exact_fit() {
        let s = extract_support(&m(&[&[0.0, 3.0, 0.0], &[0.0, 0.0, -1.0]]), 2).unwrap();
        assert_eq!(s.indices(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn extract_tie_break_is_lexicographic() {
        // Exhaustive oracle: among the three tied entries, the two smallest
        // row-major positions win.
        let s = extract_support(&m(&[&[2.0, -2.0], &[2.0, 0.0]]), 2).unwrap();
        assert_eq!(s.indices(), &[(0, 0), (0, 1)]);
        assert!(extract_support(&m(&[&[1.0]]), 2).is_err());
    }

    #[test]
    fn magnitude_method() {
        let w = m(&[&[1.0, 9.0], &[3.0, 5.0]]);
        let s = select_support(&w, SupportMethod::Magnitude, 2, 1, &mut Rng::new(0)).unwrap();
        assert_eq!(s.indices(), &[(0, 1), (1, 1)]);
    }

    #[test]
    fn random_method_is_deterministic() {
        let w = DenseMatrix::zeros(6, 7);
        let a = select_support(&w, SupportMethod::Random, 10, 1, &mut Rng::new(4)).unwrap();
        let b = select_support(&w, SupportMethod::Random, 10, 1, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn method_tags() {
        assert_eq!(
            "random".parse::<SupportMethod>().unwrap(),
            SupportMethod::Random
        );
        assert!(matches!(
            "svd".parse::<SupportMethod>(),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn zero_input_converges_immediately() {
        let w = DenseMatrix::zeros(5, 4);
        let res = solve_slr(&w, 2, 3, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut Rng::new(0)).unwrap();
        assert_eq!(res.residual_history, vec![0.0]);
        assert_eq!(matmul(&res.u, &res.v).unwrap(), w);
        assert_eq!(res.s, w);
    }

    #[test]
    fn parameter_errors() {
        let w = DenseMatrix::zeros(3, 3);
        let mut rng = Rng::new(0);
        assert!(matches!(
            solve_slr(&w, 4, 0, 1e-6, 10, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            solve_slr(&w, 1, 10, 1e-6, 10, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            solve_slr(&w, 1, 1, 0.0, 10, &mut rng),
            Err(Error::Parameter(_))
        ));
    }
}

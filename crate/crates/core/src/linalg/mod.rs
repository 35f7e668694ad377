//! Dense `f32` matrices with `f64` accumulation, a seeded random stream, and
//! the randomized low-rank factorization used by the decomposition solver.

mod factor;
mod matrix;
mod rng;

pub use factor::{orthonormalize, randomized_low_rank, OVERSAMPLE, RANK_TOLERANCE};
pub use matrix::{matmul, DenseMatrix};
pub use rng::{derive_seed, Rng};

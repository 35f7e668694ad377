use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Seeded pseudorandom stream.
///
/// Backed by ChaCha8 (portable, platform-independent output) with the
/// ziggurat standard-normal sampler from `rand_distr`. Identical seeds give
/// bit-identical streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a named consumer, derived from `(base_seed, name)`
    /// only; the current position of `self` is irrelevant.
    pub fn fork(&self, name: &str) -> Rng {
        Rng::new(derive_seed(self.seed, name))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, upper)`.
    pub fn below(&mut self, upper: usize) -> usize {
        self.inner.random_range(0..upper)
    }

    /// `amount` distinct indices drawn uniformly from `[0, length)`, in draw order.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, length, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Seed for the stream identified by `name` under `base`: the first eight bytes
/// (little-endian) of SHA-256 over `base.to_le_bytes() || name`.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

//! Explicit randomness.
//!
//! Every stochastic operation takes a `&mut dyn RandomSource`, so a run is a
//! pure function of its seed. Child streams are derived with a splitmix64
//! expansion: the `i`-th child of master seed `m` is the `i`-th output of a
//! splitmix64 generator started at `m`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer of the splitmix64 generator.
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64_mix(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub trait RandomSource {
    fn standard_normal(&mut self) -> f64;

    /// Uniform integer in `0..n`. `n` must be nonzero.
    fn below(&mut self, n: usize) -> usize;

    /// Uniform real in `[0, 1)`.
    fn uniform(&mut self) -> f64;

    /// Fresh seed for a child stream.
    fn next_seed(&mut self) -> u64;

    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            perm.swap(i, j);
        }
        perm
    }
}

/// ChaCha8-backed source.
#[derive(Debug, Clone)]
pub struct SeededSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RandomSource for SeededSource {
    fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Deterministic stub: every normal draw returns `value`, uniforms are 0.5,
/// permutations are the identity and child seeds are zero.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSource {
    pub value: f64,
}

impl ConstantSource {
    pub fn new(value: f64) -> Self {
        Self { value }
    }

    pub fn zeros() -> Self {
        Self { value: 0.0 }
    }
}

impl RandomSource for ConstantSource {
    fn standard_normal(&mut self) -> f64 {
        self.value
    }

    fn below(&mut self, _n: usize) -> usize {
        0
    }

    fn uniform(&mut self) -> f64 {
        0.5
    }

    fn next_seed(&mut self) -> u64 {
        0
    }

    fn permutation(&mut self, n: usize) -> Vec<usize> {
        (0..n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_matches_splitmix_stream() {
        // Reference splitmix64 outputs for state 0.
        assert_eq!(derive_seed(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(derive_seed(0, 1), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn seeded_source_is_reproducible() {
        let mut a = SeededSource::new(7);
        let mut b = SeededSource::new(7);
        for _ in 0..16 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
        assert_eq!(a.permutation(10), b.permutation(10));
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = SeededSource::new(3);
        let mut p = rng.permutation(37);
        p.sort_unstable();
        assert_eq!(p, (0..37).collect::<Vec<_>>());
    }
}

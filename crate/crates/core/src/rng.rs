//! Seed derivation and counter-based random draws.
//!
//! Every stochastic component receives its own stream derived from a master
//! seed and a small tuple of indices, so results never depend on the order in
//! which ensemble members or trajectories are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `seed` and `index`.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN).wrapping_add(index.wrapping_mul(GOLDEN) ^ 0xD1B5_4A32_D192_ED03))
}

/// Derives a child seed from a path of indices.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &i| derive_seed(s, i))
}

/// A ChaCha8 stream for the given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps 64 random bits to a uniform double in `[0, 1)` using the top 53 bits.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based uniform source for the cellular automaton.
///
/// The draw for `(step, target cell, direction)` is a pure function of the
/// key, which makes the simulator reproducible across platforms and lets
/// runs with different burn probabilities share the same underlying
/// uniforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    step: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed.wrapping_add(GOLDEN)),
            step: 0,
        }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Uniform draw for the current step.
    #[inline]
    pub fn uniform(&self, cell: usize, direction: usize) -> f64 {
        let counter = (self.step << 32) ^ ((cell as u64) << 3) ^ direction as u64;
        unit_f64(mix64(self.key ^ mix64(counter.wrapping_add(GOLDEN))))
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_are_stable() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
        assert_ne!(derive_seed(8, 0), a);
    }

    #[test]
    fn counter_uniforms_are_roughly_uniform() {
        let mut rng = CounterRng::new(42);
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..20 {
            for cell in 0..500 {
                for dir in 0..8 {
                    let u = rng.uniform(cell, dir);
                    assert!((0.0..1.0).contains(&u));
                    sum += u;
                    n += 1;
                }
            }
            rng.advance();
        }
        let mean = sum / n as f64;
        // 80k draws: sd of the mean is ~0.001
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }
}

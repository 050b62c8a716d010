//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from the run seed plus structural tags (round, client id, trial).
//! Results are therefore independent of scheduling and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a base seed with up to two structural tags (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag_a: u64, tag_b: u64) -> u64 {
    let mut z = base ^ tag_a.rotate_left(24) ^ tag_b.rotate_left(48);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// ChaCha stream for a derived seed. ChaCha output is stable across
/// platforms and releases, which keeps recorded expectations valid.
pub fn rng_for(base: u64, tag_a: u64, tag_b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag_a, tag_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
        assert_ne!(derive_seed(7, 1, 2), derive_seed(7, 2, 1));
        assert_ne!(derive_seed(7, 0, 0), derive_seed(8, 0, 0));
    }
}

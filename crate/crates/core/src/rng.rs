//! Seeded randomness.
//!
//! Every stochastic routine takes an explicit 64-bit seed or a generator
//! handle. Independent streams are split off a root seed with
//! [`derive_seed`], which runs the SplitMix64 finalizer over
//! `seed ^ golden * (stream + 1)`. Streams derived from distinct tags are
//! statistically independent for practical purposes, and the derivation is
//! stable across platforms and releases, so results are reproducible
//! bit-for-bit given the same seed.
//!
//! The generator itself is ChaCha8, seeded from the derived 64-bit value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent child stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ GOLDEN.wrapping_mul(stream.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for child stream `stream` of `seed`.
pub fn child_rng(seed: u64, stream: u64) -> Rng {
    rng_from_seed(derive_seed(seed, stream))
}

/// Stream tags used inside the crate, kept in one place so that no two
/// consumers share a stream by accident.
pub(crate) mod streams {
    pub const MDP_GENERATION: u64 = 1;
    pub const DECOYS: u64 = 2;
    pub const LEARNER_INIT: u64 = 3;
    pub const ONLINE_EPISODES: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const DECODER_INIT: u64 = 6;
    pub const LATENT_SAMPLES: u64 = 7;
    pub const CHECKS: u64 = 8;
    pub const SIGN_PATTERNS: u64 = 9;
    pub const SWEEP: u64 = 10;
    pub const TRAJECTORIES: u64 = 11;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_differ_and_repeat() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_ne!(derive_seed(42, 0), derive_seed(43, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        let a: Vec<u64> = (0..4).map(|_| child_rng(5, 2).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}

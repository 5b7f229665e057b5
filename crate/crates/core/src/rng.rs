//! Deterministic random streams.
//!
//! All randomness in the crate comes from xoshiro256** whose 256-bit state is
//! filled from a 64-bit seed by four successive SplitMix64 outputs (this is
//! `SeedableRng::seed_from_u64` for `Xoshiro256StarStar`). Independent streams
//! (per epoch, per domain, per sample) get their seed by folding labels into
//! the base seed with the SplitMix64 finalizer, see [`derive_seed`].

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `labels` into `seed`, one SplitMix64 round per label.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ l))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream labels, kept distinct so that no two consumers share a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SOURCE_ORDER: u64 = 2;
    pub const TARGET_ORDER: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const DISTILL_ORDER: u64 = 5;
}

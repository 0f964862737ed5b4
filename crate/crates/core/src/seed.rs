//! Deterministic seed derivation.
//!
//! Every random draw in a run is keyed on the run seed plus a path of
//! integers (iteration, domain, sample slot, ...), so any draw can be
//! recomputed without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`. Order matters: `[1, 2]` and `[2, 1]` give
/// different seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags keep unrelated draws on separate seed paths.
pub(crate) mod stream {
    pub const SAMPLER: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const FEW_SHOT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
}

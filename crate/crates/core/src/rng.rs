//! Seed derivation for reproducible Monte-Carlo.
//!
//! Every stochastic operation takes its RNG from the caller. Parallel work
//! derives one independent stream per work item with [`derive_seed`], a
//! SplitMix64 fold of the master seed and the item's indices, so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `indices` into `master` one at a time.
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(master), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, indices: &[u64]) -> SimRng {
    rng_from_seed(derive_seed(master, indices))
}

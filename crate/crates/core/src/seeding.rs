//! Seed derivation for reproducible, parallelism-independent randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep independent consumers of the run seed apart.
pub mod stream {
    pub const PROMPTS: u64 = 0x5052_4f4d;
    pub const GROUPS: u64 = 0x4752_5550;
    pub const EVAL: u64 = 0x4556_414c;
    pub const INIT: u64 = 0x494e_4954;
    pub const JITTER: u64 = 0x4a49_5454;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a run seed with a path of indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

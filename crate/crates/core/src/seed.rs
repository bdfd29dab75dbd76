//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from the master seed and a small tuple of
//! coordinates (generation, child index, purpose), so results do not depend on thread
//! scheduling or on how many evaluations run concurrently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod stream {
    pub const INIT_PARENT: u64 = 0x01;
    pub const MUTATE: u64 = 0x02;
    pub const TRAIN: u64 = 0x03;
    pub const WEIGHTS: u64 = 0x04;
    pub const MODIFY: u64 = 0x05;
    pub const VALIDATION: u64 = 0x06;
    pub const FINETUNE: u64 = 0x07;
    pub const SPLIT: u64 = 0x08;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of coordinates into a new 64-bit seed.
pub fn derive(master: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, coords: &[u64]) -> Rng {
    rng_from(derive(master, coords))
}

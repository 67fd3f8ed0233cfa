//! Seed derivation. Every independently reproducible unit of work (an episode,
//! a trial, a repeat, a generated class) gets its own stream derived from a
//! parent seed and an index, so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed number `index` of `seed`.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Child seed for a named purpose, e.g. `"val"` or `"test"`.
pub fn derive_named(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(splitmix64(seed ^ 0x6a09_e667_f3bc_c909), |acc, b| {
            splitmix64(acc ^ b as u64)
        })
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

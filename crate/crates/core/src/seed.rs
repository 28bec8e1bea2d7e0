//! Seed derivation so each pipeline stage draws from an independent stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `tag` of `base`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(base: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// Well-known stream tags.
pub mod tags {
    pub const ARCH_INIT: u64 = 1;
    pub const WEIGHT_INIT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SUPERNET_TRAIN: u64 = 4;
    pub const MASK_TRAIN: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const RANDOM_ARCH: u64 = 7;
    pub const TEST_SPLIT: u64 = 8;
    pub const RANDOM_INIT: u64 = 9;
    pub const TRIGGER: u64 = 10;
    pub const ORACLE: u64 = 11;
    pub const SYNTHETIC: u64 = 12;
}

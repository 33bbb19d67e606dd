//! Deterministic seed derivation. Every random stream in the crate is keyed by
//! a base seed plus a path of integers, so parallel jobs never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

// stream tags
pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_LAYOUT: u64 = 2;
pub(crate) const STREAM_SHUFFLE: u64 = 3;
pub(crate) const STREAM_ATTACK: u64 = 4;
pub(crate) const STREAM_INIT: u64 = 5;
pub(crate) const STREAM_SUBSET: u64 = 6;
pub(crate) const STREAM_TRIAL: u64 = 7;
pub(crate) const STREAM_PAIRS: u64 = 8;

//! Seeded random streams.
//!
//! Every random draw in the crate comes from a xoshiro256** generator whose
//! state is derived from `(seed, purpose, index)`. The derivation is a
//! SplitMix64 fold, so streams for different purposes or indices never share
//! state and results are identical on every platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type StreamRng = Xoshiro256StarStar;

/// What a random stream is used for. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Weights = 1,
    ProxyNoise = 2,
    Shuffle = 3,
    DataGen = 4,
    FeatureNoise = 5,
    Split = 6,
    Experiment = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a purpose and an index.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, index))
}

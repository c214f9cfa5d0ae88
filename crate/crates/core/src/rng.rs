//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with stream coordinates (round, client, ...),
//! so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with any number of stream coordinates.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(base: u64, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, coords))
}

// Stream tags keep independent consumers of the same seed apart.
pub(crate) const TAG_SPLIT: u64 = 0x5350_4c49;
pub(crate) const TAG_PARTITION: u64 = 0x5041_5254;
pub(crate) const TAG_INIT: u64 = 0x494e_4954;
pub(crate) const TAG_ADAPTER: u64 = 0x4144_4150;
pub(crate) const TAG_SELECT: u64 = 0x5345_4c45;
pub(crate) const TAG_LOCAL: u64 = 0x4c4f_4341;
pub(crate) const TAG_MUTATE: u64 = 0x4d55_5441;
pub(crate) const TAG_SYNTH: u64 = 0x5359_4e54;
pub(crate) const TAG_BASELINE: u64 = 0x4241_5345;

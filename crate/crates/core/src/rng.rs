//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`Rng`] built here, so runs
//! are pure functions of their seeds. Independent streams (per epoch, per
//! subject, per fold) are derived by hashing a path of integers into a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A stream keyed by `seed` and a path of stream indices.
pub fn derive(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix(seed ^ 0x5354_4d41_45u64);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

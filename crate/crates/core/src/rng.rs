//! Seed derivation and sampling helpers.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a root
//! seed and a path of indices (batch, trajectory, time, ...). Streams never
//! depend on scheduling order, so parallel and sequential runs agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `index` from a parent seed.
pub fn split_seed(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws an index from a probability vector by inverse CDF.
///
/// Rounding slack at the top of the CDF falls on the last index with
/// positive mass.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if draw < acc {
            return i;
        }
    }
    last
}

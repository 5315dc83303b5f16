//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha20 stream derived
//! from a single user seed: the 64-bit seed fills the key, and the stream id
//! selects one of 2^64 independent keystreams. Streams never overlap, so
//! adding draws in one consumer cannot shift the values seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Identifies an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Excitation = 1,
    Split = 2,
    WeightInit = 3,
    Shuffle = 4,
    TestProfile = 5,
    Scenario = 6,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform draw on `[lo, hi]`; returns `lo` exactly when the interval is a point.
pub fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let r: f64 = rng.random();
    if hi == lo {
        lo
    } else {
        lo + (hi - lo) * r
    }
}

/// Fisher-Yates shuffle with an explicit index draw, independent of the
/// `rand` version's slice helpers.
pub fn shuffle<T, R: Rng>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

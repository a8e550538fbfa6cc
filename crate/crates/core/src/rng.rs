//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed with `ChaCha8Rng::seed_from_u64(seed)`
//! and then pinned to a 64-bit stream id with `set_stream`. Drawing from one
//! stream never perturbs another, so e.g. walk `w` of target `t` yields the same
//! steps no matter how many other walks ran before it.
//!
//! Walk streams use id `(target << 32) | walk`. The two conversions used by the
//! random-walk sampler are fixed here so that other implementations can replay
//! a walk from the raw `next_u64` sequence:
//!
//! * [`unit_f64`]: `(x >> 11) * 2^-53`, a uniform draw in `[0, 1)`;
//! * [`bounded_index`]: `(x * n) >> 64` computed in 128 bits, a draw in `[0, n)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids for the non-walk consumers of randomness.
pub mod streams {
    pub const LADDER_INIT: u64 = 0;
    pub const EXIT_HEAD_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLITS: u64 = 4;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn walk_stream(seed: u64, target: usize, walk: usize) -> ChaCha8Rng {
    stream(seed, ((target as u64) << 32) | (walk as u64 & 0xFFFF_FFFF))
}

pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn bounded_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Fisher-Yates with [`bounded_index`] draws.
pub fn shuffle<T, R: RngCore + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = bounded_index(rng, i + 1);
        items.swap(i, j);
    }
}

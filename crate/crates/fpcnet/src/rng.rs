//! Seeded, portable random streams.
//!
//! All randomness in the crate goes through ChaCha8 so that any run is
//! reproducible from a single u64 seed across platforms. Independent
//! consumers (ensembles, trials, layers) get their own stream id, so results
//! do not depend on scheduling or evaluation order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// ChaCha8 stream for (`seed`, `stream_id`).
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stream keyed by two small indices (each must fit in 32 bits).
pub fn stream2(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    debug_assert!(a < (1 << 32) && b < (1 << 32));
    stream(seed, (a << 32) | b)
}

/// Derive a sub-seed from (seed, salt) with a splitmix64 finalizer, for
/// consumers that need their own independent seed rather than a stream id.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [lo, hi).
pub fn uniform<S: Scalar>(rng: &mut impl Rng, lo: f64, hi: f64) -> S {
    S::from_f64(lo + rng.gen::<f64>() * (hi - lo))
}

/// Symmetric uniform draw in [-scale, scale].
pub fn uniform_symmetric<S: Scalar>(rng: &mut impl Rng, scale: f64) -> S {
    S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

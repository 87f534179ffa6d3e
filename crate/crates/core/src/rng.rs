//! Seeded random streams.
//!
//! Every random quantity in an experiment is drawn from a ChaCha8 stream keyed by
//! `(seed, repetition, role)`. ChaCha is counter based, so streams are independent
//! and can be replayed in any order, which keeps parallel repetitions bit-identical
//! to sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for inside one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Observations = 1,
    Initialisation = 2,
    Generator = 3,
    Verification = 4,
}

pub fn stream_rng(seed: u64, repetition: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((repetition << 8) | role as u64);
    rng
}

//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed with the
//! stream id selecting an independent ChaCha stream, so any sample can be
//! regenerated on its own without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps the streams of one sample disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Phantom = 0,
    HighCountScan = 1,
    LowCountScan = 2,
    Split = 3,
    Init = 4,
    Shuffle = 5,
}

pub fn stream(master_seed: u64, id: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id.wrapping_mul(16).wrapping_add(purpose as u64));
    rng
}

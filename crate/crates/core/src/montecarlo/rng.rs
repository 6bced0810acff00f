//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha stream selected by
//! `(seed, replication, block)`, so a replication's draws never depend on
//! which thread ran it or on how many variables other blocks consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Variable blocks. Each DGP variable family gets its own stream.
pub mod block {
    pub const INSTRUMENTS: u8 = 0;
    pub const FIRST_STAGE: u8 = 1;
    pub const HETEROSKEDASTIC: u8 = 2;
    pub const EFFECTS: u8 = 3;
    pub const INITIAL: u8 = 4;
    pub const INNOVATIONS: u8 = 5;
    pub const SHOCKS: u8 = 6;
    pub const SCALES: u8 = 7;
    pub const BOOTSTRAP_SEED: u8 = 8;
    pub const RESAMPLE: u8 = 9;
}

/// The stream for `(seed, index, block)`. `index` may use at most 56 bits.
pub fn stream(seed: u64, index: u64, block: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | u64::from(block));
    rng
}

/// All streams of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub seed: u64,
    pub index: u64,
}

impl Streams {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { seed, index }
    }

    pub fn get(&self, block: u8) -> ChaCha8Rng {
        stream(self.seed, self.index, block)
    }
}

/// A child seed derived from `(seed, index)`, used to key nested
/// randomisation such as a bootstrap inside a Monte Carlo replication.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    stream(seed, index, block::BOOTSTRAP_SEED).next_u64()
}

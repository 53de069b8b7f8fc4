//! Seeded randomness. Every consumer draws from its own ChaCha stream of the
//! run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Party-specific streams add the party index.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TOP_INIT: u64 = 3;
    pub const DEALER: u64 = 4;
    pub const AUX: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const SELECT: u64 = 7;
    pub const ESTIMATE: u64 = 8;
    pub const BLOBS: u64 = 9;
    pub const ATTACK: u64 = 300;
    pub const BOTTOM_INIT: u64 = 100;
    pub const PARTY_SHARES: u64 = 200;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

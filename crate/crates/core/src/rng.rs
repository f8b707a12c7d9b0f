//! Seeded, splittable random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(global seed, purpose, index)`. Streams are ChaCha8 instances whose key
//! is derived from the seed and purpose and whose 64-bit stream id is the
//! index, so episode `i` draws the same numbers no matter which thread runs
//! it or in what order.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// What a stream is used for. Distinct purposes never share keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Document = 1,
    Init = 2,
    Episode = 3,
    Shuffle = 4,
    Projection = 5,
    Pretrain = 6,
    Test = 7,
}

/// Returns the stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"mdo-rng\0");
    let mut rng = StreamRng::from_seed(key);
    rng.set_stream(index);
    rng
}

//! Deterministic random streams.
//!
//! Every consumer of randomness asks for a stream keyed by `(seed, tag)`.
//! Streams are ChaCha8 keyed by the seed with the tag hashed into the
//! stream id, so two purposes never share state and results do not depend
//! on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn purpose tags into stream ids.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, tag: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag_hash(tag));
    rng
}

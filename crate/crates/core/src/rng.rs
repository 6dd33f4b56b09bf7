//! Named random substreams. Every consumer of randomness derives its own
//! ChaCha stream from the run seed and a stable name, so adding a consumer never
//! shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Substream indexed by a name and an integer (chunk, epoch, run...).
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> StreamRng {
    substream(seed, &format!("{name}/{index}"))
}

//! Counter-based splitting of a master seed into independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `id` of the master `seed`.
pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Packs a purpose tag and two counters into a stream id.
pub fn stream_id(tag: u8, major: u64, minor: u64) -> u64 {
    ((tag as u64) << 56) | ((major & 0xff_ffff_ffff) << 16) | (minor & 0xffff)
}

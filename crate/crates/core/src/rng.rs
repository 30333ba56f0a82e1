//! Named, index-addressed random streams.
//!
//! Every random decision in a run is drawn from a generator seeded as
//! `derive_seed(global_seed, stream, index)`, so results never depend on the
//! order in which work is scheduled and a run can be resumed from any step
//! without saving generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a over the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn stream_rng(seed: u64, stream: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Combines two indices into one, for streams addressed by (step, item).
pub fn pair_index(a: u64, b: u64) -> u64 {
    splitmix64(a).wrapping_add(b)
}

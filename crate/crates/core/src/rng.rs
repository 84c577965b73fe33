//! Named random sub-streams.
//!
//! Every random draw in the crate comes from a stream derived from the run
//! seed, a domain label and a tuple of indices. Streams for different
//! participants or chains never share state, so the order in which they are
//! consumed cannot change any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, domain, indices)`.
pub fn stream(seed: u64, domain: &str, indices: &[u64]) -> Stream {
    let mut h = splitmix64(seed);
    for b in domain.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // separator so ("ab", [1]) and ("a", [..]) cannot collide through the byte path
    h = splitmix64(h ^ 0xff);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}

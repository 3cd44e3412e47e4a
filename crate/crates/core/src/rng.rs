//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by a 64-bit root seed plus a
//! short path of counters (chain, iteration, individual, ...). Streams are
//! independent of scheduling, so thread count never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags, so that e.g. step 1 and step 3 of the same iteration never
/// share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Simulate = 1,
    Impute = 2,
    Init = 3,
    Coefficients = 4,
    Shocks = 5,
    Volatility = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a counter path into a child seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream_rng(root: u64, stream: Stream, path: &[u64]) -> StreamRng {
    let seed = derive_seed(derive_seed(root, &[stream as u64]), path);
    ChaCha8Rng::seed_from_u64(seed)
}

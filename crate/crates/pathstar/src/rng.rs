//! Deterministic RNG streams. Every random draw in the crate comes from a
//! (seed, domain, index) triple, so instance i of a dataset or the shuffle of
//! epoch e can be reproduced in isolation, in any order, on any thread.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream is used for. Each domain keys an unrelated cipher stream
/// even when the user-visible seed is the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Graph/instance sampling; index = instance number.
    Instance = 1,
    /// Parameter initialization; index = 0.
    Init = 2,
    /// Epoch shuffling of the training set; index = epoch.
    Shuffle = 3,
    /// Random-neighbor draws for the cheat probe; index = instance number.
    Probe = 4,
}

/// Counter-based stream for (seed, domain, index).
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(mix(seed, domain as u64));
    rng.set_stream(index);
    rng
}

// splitmix64 finalizer over (seed, domain); decorrelates nearby seeds.
fn mix(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Seed handling. Every stochastic routine takes an explicit `u64` seed;
//! independent streams are derived with [`split`].

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of child stream `index` from `parent`.
///
/// Distinct `(parent, index)` pairs give statistically independent seeds, and
/// the mapping is a pure function so campaigns are order independent.
pub fn split(parent: u64, index: u64) -> u64 {
    mix(mix(parent ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(mix(index.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Named sub-streams used inside one simulated block.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    SymbolsX = 1,
    SymbolsY = 2,
    Pilots = 3,
    Channel = 4,
    Calibration = 5,
}

pub fn stream(seed: u64, which: Stream) -> u64 {
    split(seed, which as u64)
}

//! Deterministic stream derivation.
//!
//! All randomness in a run flows from one top-level `u64` seed. Each
//! consumer (trajectory, chain, metric estimator) gets its own ChaCha
//! stream derived from `(seed, domain, index)`, so changing the batch
//! size or reordering work never reshuffles earlier streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams from distinct subsystems disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    Trajectory,
    MhChain,
    Metric,
    Subsample,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::Trajectory => 0x1,
            StreamDomain::MhChain => 0x2,
            StreamDomain::Metric => 0x3,
            StreamDomain::Subsample => 0x4,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the RNG stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ domain.tag().wrapping_mul(0xa076_1d64_78bd_642f));
    state = splitmix64(state ^ index);
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

//! Deterministic random streams.
//!
//! All randomness in the pipeline flows through counter-based ChaCha
//! substreams: a master seed plus a (domain, index) pair fully determines a
//! stream, so windows and training jobs can be generated in parallel without
//! the schedule affecting the output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each domain gets a disjoint 32-bit index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    TrainWindows = 1,
    ValWindows = 2,
    TestWindows = 3,
    FaultInjection = 4,
    Trace = 5,
    ModelInit = 6,
    Shuffle = 7,
    ReparamNoise = 8,
    GmmInit = 9,
}

/// An independent deterministic substream for (seed, domain, index).
pub fn substream(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | (index & 0xffff_ffff));
    rng
}

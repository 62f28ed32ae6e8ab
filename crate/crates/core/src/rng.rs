//! Seeded random streams.
//!
//! One master seed per run expands into independent ChaCha streams, one per
//! source of randomness, so that e.g. changing the number of λ draws does not
//! shift the initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Edges = 2,
    Lambda = 3,
    Perturb = 4,
    Noise = 5,
    Data = 6,
    Split = 7,
    Validation = 8,
    Eval = 9,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Derives a stream keyed by an extra index, for per-epoch reseeding.
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

/// The full set of streams used by a training run.
pub struct RunStreams {
    pub init: Rng,
    pub edges: Rng,
    pub lambda: Rng,
    pub perturb: Rng,
    pub noise: Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: stream(seed, Stream::Init),
            edges: stream(seed, Stream::Edges),
            lambda: stream(seed, Stream::Lambda),
            perturb: stream(seed, Stream::Perturb),
            noise: stream(seed, Stream::Noise),
        }
    }

    /// Streams for validation draws, disjoint from the training streams.
    pub fn validation(seed: u64) -> Self {
        let at = |i| indexed_stream(seed, Stream::Validation, i);
        Self {
            init: at(1),
            edges: at(2),
            lambda: at(3),
            perturb: at(4),
            noise: at(5),
        }
    }
}

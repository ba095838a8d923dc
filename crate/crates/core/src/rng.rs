//! Named random streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent sub-streams, so that e.g. dropout draws never shift
/// parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Teacher = 4,
    SynthLayout = 5,
    SynthUtterances = 6,
    SynthProjection = 7,
    SynthNoise = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

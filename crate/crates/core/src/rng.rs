//! Seeded random streams.
//!
//! Every stochastic choice draws from a ChaCha8 stream keyed by the run seed
//! and a purpose tag, so adding draws for one purpose never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Styles,
    Templates,
    Images,
    ParamInit,
    Batches,
    MetaSplit,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Styles => 1,
            Purpose::Templates => 2,
            Purpose::Images => 3,
            Purpose::ParamInit => 4,
            Purpose::Batches => 5,
            Purpose::MetaSplit => 6,
            Purpose::Test => 7,
        }
    }
}

/// Independent stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose.tag() << 48) ^ index);
    rng
}

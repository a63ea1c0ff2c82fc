//! Named random streams.
//!
//! Every stochastic decision in a chain draws from one of a few independent
//! ChaCha streams derived from the chain seed, so that changing how often one
//! component consumes randomness (say, the surrogate) never shifts the
//! proposals or acceptance draws. Two chains with the same seed therefore see
//! identical proposal and uniform sequences whatever their surrogate does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Proposal = 1,
    Accept = 2,
    Refine = 3,
    Surrogate = 4,
    Seeding = 5,
    Data = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// The per-chain streams.
#[derive(Debug, Clone)]
pub struct ChainRngs {
    pub proposal: ChaCha8Rng,
    pub accept: ChaCha8Rng,
    pub refine: ChaCha8Rng,
    pub surrogate: ChaCha8Rng,
    pub seeding: ChaCha8Rng,
}

impl ChainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            proposal: stream(seed, Stream::Proposal),
            accept: stream(seed, Stream::Accept),
            refine: stream(seed, Stream::Refine),
            surrogate: stream(seed, Stream::Surrogate),
            seeding: stream(seed, Stream::Seeding),
        }
    }
}

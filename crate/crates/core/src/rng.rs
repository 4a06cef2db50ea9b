//! Per-label random streams.
//!
//! Each label owns a ChaCha8 key derived from SHA-256 of the master seed and
//! the label's injective encoding. Stream 0 of that key feeds the particle's
//! Brownian increments; stream 1 feeds its dominating-rate event clock and the
//! uniform marks. Nothing about a label's randomness depends on the order in
//! which particles are created or advanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use sha2::{Digest, Sha256};

use crate::labels::Label;

const DOMAIN: &[u8] = b"branchctl/particle-stream/v1";

/// Source of the independent `(B^i, Q^i)` family, keyed by label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomDriver {
    seed: u64,
}

impl RandomDriver {
    pub fn new(seed: u64) -> Self {
        RandomDriver { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self, label: &Label) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.seed.to_le_bytes());
        h.update(label.encode());
        h.finalize().into()
    }

    pub fn streams(&self, label: &Label) -> ParticleStreams {
        let key = self.key(label);
        let mut brownian = ChaCha8Rng::from_seed(key);
        brownian.set_stream(0);
        let mut clock = ChaCha8Rng::from_seed(key);
        clock.set_stream(1);
        ParticleStreams { brownian, clock }
    }
}

/// The two streams owned by one particle.
#[derive(Clone, Debug)]
pub struct ParticleStreams {
    brownian: ChaCha8Rng,
    clock: ChaCha8Rng,
}

impl ParticleStreams {
    /// Standard normal variate for the next Brownian increment.
    pub fn gaussian(&mut self) -> f64 {
        self.brownian.sample(StandardNormal)
    }

    /// Waiting time to the next ring of a rate-`rate` Poisson clock.
    pub fn next_gap(&mut self, rate: f64) -> f64 {
        let e: f64 = self.clock.sample(Exp1);
        e / rate
    }

    /// Uniform mark on `[0, upper)`.
    pub fn mark(&mut self, upper: f64) -> f64 {
        self.clock.gen::<f64>() * upper
    }
}

//! Counter-based random streams.
//!
//! Every random draw in a simulation is addressed by a key built from the run
//! seed plus the coordinates of the draw (client, round, inner step, ...).
//! Two draws with the same address always produce the same numbers, no matter
//! which thread computes them or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Gradient = 1,
    Quantize = 2,
    Data = 3,
    Partition = 4,
    Topology = 5,
    Init = 6,
    Probe = 7,
}

/// Address of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ GOLDEN))
    }

    /// Derives a child key by absorbing one more coordinate.
    pub fn child(self, coordinate: u64) -> Self {
        StreamKey(mix64(self.0.wrapping_add(GOLDEN).wrapping_add(mix64(coordinate))))
    }

    pub fn purpose(self, purpose: Purpose) -> Self {
        self.child(purpose as u64)
    }

    /// Key for the stochastic gradient drawn by `client` at inner step
    /// `step` of communication round `round`.
    pub fn gradient(seed: u64, client: usize, round: u64, step: u64) -> Self {
        StreamKey::new(seed)
            .purpose(Purpose::Gradient)
            .child(client as u64)
            .child(round)
            .child(step)
    }

    /// Key for the stochastic quantizer stream of `client` in `round`; the
    /// coordinate index is the counter.
    pub fn quantize(seed: u64, round: u64, client: usize) -> Self {
        StreamKey::new(seed)
            .purpose(Purpose::Quantize)
            .child(round)
            .child(client as u64)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Sequential generator for this address.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Uniform draw in `[0, 1)` at position `counter` of this stream.
    pub fn uniform(self, counter: u64) -> f64 {
        let bits = mix64(self.0 ^ mix64(counter.wrapping_add(GOLDEN)));
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

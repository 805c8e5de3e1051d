//! Reproducible random streams.
//!
//! Every stream is ChaCha20 (a counter-based generator) keyed by the run
//! seed, with the 64-bit ChaCha stream selector set from a [`StreamId`]
//! and an optional sub-stream index. The same `(seed, stream, draw index)`
//! always yields the same value on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamId {
    Weights,
    FeatureMask,
    LayerMask,
    DataMask,
    DataShuffle,
    TaskGen,
    Oracle,
}

impl StreamId {
    fn code(self) -> u64 {
        match self {
            StreamId::Weights => 1,
            StreamId::FeatureMask => 2,
            StreamId::LayerMask => 3,
            StreamId::DataMask => 4,
            StreamId::DataShuffle => 5,
            StreamId::TaskGen => 6,
            StreamId::Oracle => 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: StreamId,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        Self::substream(seed, stream, 0)
    }

    /// Independent sub-stream `index` of `(seed, stream)`.
    pub fn substream(seed: u64, stream: StreamId, index: u32) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream((stream.code() << 32) | u64::from(index));
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

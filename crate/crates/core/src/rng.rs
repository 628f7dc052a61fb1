//! Reproducible random streams.
//!
//! A stream is identified by `(base_seed, stream_id)`. The generator is ChaCha8,
//! a counter-based cipher whose 64-bit stream selector gives every replication
//! its own non-overlapping sequence without any coordination between threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    base_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(base_seed);
        inner.set_stream(stream_id);
        Self {
            base_seed,
            stream_id,
            inner,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream on the same seed with a different id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.base_seed, stream_id)
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Packs a (cell, replication, lane) triple into a stream id.
///
/// Cells get 20 bits, replications 40 bits and lanes 4 bits, so distinct triples
/// within those ranges never collide.
pub fn stream_key(cell: u64, replication: u64, lane: u64) -> u64 {
    debug_assert!(cell < 1 << 20 && replication < 1 << 40 && lane < 1 << 4);
    (cell << 44) | (replication << 4) | lane
}

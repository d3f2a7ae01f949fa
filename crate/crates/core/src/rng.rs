//! Counter-based random streams.
//!
//! Every random decision in a run (drop plans, dropout masks, batch windows,
//! parameter init, corpus generation) draws from a [`StreamRng`] whose key is
//! a hash of `(seed, domain, indices...)`. Output `i` of a stream is
//! `splitmix64(key + i * GAMMA)`, so any stream can be reproduced without
//! replaying the others and the result never depends on execution order.

use rand::RngCore;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream domains; keeps e.g. the dropout stream of layer 3 apart from the
/// plan stream of layer 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Plan = 1,
    Dropout = 2,
    Batch = 3,
    Init = 4,
    Bypass = 5,
    Mask = 6,
    Corpus = 7,
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed, a domain tag and a list of indices into a stream key.
pub fn stream_key(seed: u64, domain: Domain, words: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0x6A09_E667_F3BC_C909);
    h = mix64(h ^ mix64((domain as u64).wrapping_add(GAMMA)));
    for &w in words {
        h = mix64(h ^ mix64(w.wrapping_add(GAMMA)));
    }
    h
}

/// SplitMix64 evaluated at successive counters of a fixed key.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn from_key(key: u64) -> Self {
        StreamRng { key, counter: 0 }
    }

    pub fn new(seed: u64, domain: Domain, words: &[u64]) -> Self {
        Self::from_key(stream_key(seed, domain, words))
    }

    #[inline]
    pub fn next(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

//! Counter-based random streams.
//!
//! Every (seed, head, query) triple names an independent stream, so drop
//! perturbations do not depend on evaluation order and parallel routing
//! reproduces serial routing bit for bit.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream `n` of this generator is `mix64(key + n * GOLDEN)`: stateless apart
/// from the counter.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x6d6f_635f_7365_6564),
            counter: 0,
        }
    }

    /// Independent stream for `(seed, domain, a, b)`.
    pub fn keyed(seed: u64, domain: u64, a: u64, b: u64) -> Self {
        let mut key = mix64(seed ^ 0x6d6f_635f_7365_6564);
        for word in [domain, a, b] {
            key = mix64(key ^ mix64(word.wrapping_add(GOLDEN)));
        }
        Self { key, counter: 0 }
    }

    /// Random value at an absolute position, without advancing the stream.
    #[inline]
    pub fn at(&self, position: u64) -> u64 {
        mix64(self.key.wrapping_add(position.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

//! Deterministic, counter-addressable random streams.
//!
//! Every stream is a ChaCha8 keystream selected by `(seed, stream_id)`. The
//! counter counts 64-bit draws, so a stream can be rewound or skipped to any
//! position and two runs with the same key produce identical bits on every
//! platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNIT_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            counter: 0,
            inner,
        }
    }

    /// Stream whose id is derived from a tuple of keys, e.g. `(arm, tensor, step)`.
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        Self::new(seed, stream_key(keys))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Repositions the stream so the next draw is draw number `counter`.
    pub fn seek(&mut self, counter: u64) {
        self.inner.set_word_pos(u128::from(counter) * 2);
        self.counter = counter;
    }

    pub fn next_u64_draw(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64_draw() >> 11) as f64 * UNIT_53
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift with rejection).
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index on empty range");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64_draw()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64_draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_u64_draw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64_draw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single stream id.
pub fn stream_key(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x6C62_272E_07BB_0142, |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Stable 64-bit FNV-1a hash of a label, used to key streams by name.
pub fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

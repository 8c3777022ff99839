//! Counter-based random streams.
//!
//! A stream is addressed by `(master_seed, stream_index)`; the n-th output is a
//! pure function of that address and `n`. Nothing is shared between streams, so
//! sweeps can hand one stream to each task and get the same numbers regardless
//! of scheduling.

use rand::{Error as RandError, RngCore};

const WY_P0: u64 = 0xa076_1d64_78bd_642f;
const WY_P1: u64 = 0xe703_7ed1_a0b4_28db;

#[inline]
fn wymix(a: u64, b: u64) -> u64 {
    let t = (a as u128).wrapping_mul(b as u128);
    ((t >> 64) as u64) ^ (t as u64)
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic, splittable stream of random numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let key = splitmix(splitmix(master_seed) ^ splitmix(stream_index.wrapping_add(WY_P1)));
        Self {
            master_seed,
            stream_index,
            key,
            counter: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child stream keyed by `index`. Independent of this stream's counter.
    pub fn substream(&self, index: u64) -> RngStream {
        let derived = splitmix(self.key ^ splitmix(index.wrapping_mul(WY_P0).wrapping_add(1)));
        RngStream::new(self.master_seed, derived)
    }

    /// Output at an arbitrary counter position, without advancing.
    #[inline]
    pub fn word_at(&self, counter: u64) -> u64 {
        let s = self.key.wrapping_add(counter.wrapping_mul(WY_P0));
        wymix(s, s ^ WY_P1)
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        let w = self.word_at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        w
    }

    /// Uniform draw in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (ziggurat).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(self)
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_word().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.fill_bytes(dest);
        Ok(())
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Reproducible random streams.
//!
//! Every stochastic draw in the simulator comes from an [`RngStream`], a
//! ChaCha8 generator keyed by `(seed, stream id)`. ChaCha is counter-based,
//! so a stream yields the same sequence on every platform, and streams with
//! different ids are independent. Work that may run on any thread derives
//! its own child stream with [`RngStream::derive`] rather than sharing one.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream identified by `tag`, starting from a fresh counter.
    ///
    /// Depends only on `(seed, stream id, tag)`, never on how many values
    /// were already drawn from `self`.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(self.seed, mix(mix(self.stream) ^ mix(tag.wrapping_add(1))))
    }

    /// Child stream for a path of tags, e.g. `[point, seed, image]`.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    /// One standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Well-known child-stream tags, so that independent consumers never collide.
pub mod tags {
    pub const PROGRAM: u64 = 0x5052_4f47;
    pub const AGE: u64 = 0x0041_4745;
    pub const READ: u64 = 0x5245_4144;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const TRAIN_NOISE: u64 = 0x4e4f_4953;
}

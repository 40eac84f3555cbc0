//! Seeded random streams.
//!
//! All randomness flows through [`StreamRng`], a SplitMix64 generator whose
//! state is the raw seed. Independent streams are derived from a master seed
//! with [`stream_seed`]:
//!
//! ```text
//! mix(z)              = SplitMix64 output finalizer applied to z
//! stream_seed(m, id)  = mix(m ^ mix(id + 0x9E3779B97F4A7C15))
//! ```
//!
//! Uniform floats take the top 53 bits of one output (`(x >> 11) * 2^-53`);
//! bounded integers use the multiply-shift reduction `(x * n) >> 64`.
//! Both are simple enough to reproduce in any language.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `id` of master seed `master`.
pub fn stream_seed(master: u64, id: u64) -> u64 {
    mix64(master ^ mix64(id.wrapping_add(GOLDEN_GAMMA)))
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: SplitMix64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Sub-stream `id` of `master`.
    pub fn stream(master: u64, id: u64) -> Self {
        Self::new(stream_seed(master, id))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Standard normal draw (Box-Muller, two uniforms per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

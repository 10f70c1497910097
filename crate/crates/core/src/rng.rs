//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, purpose, index...)`. A stream is a pure function of its key and an
//! internal counter, so the draw at position `n` never depends on how many
//! draws other streams made, on batch slicing, or on thread scheduling. This
//! is what makes seeded runs bit-identical end to end.

/// Labels for the independent random streams used across the crate.
///
/// Keeping them in one place avoids accidental key collisions between stages.
pub mod purpose {
    pub const NET_INIT: u64 = 0x01;
    pub const REF_BATCH: u64 = 0x02;
    pub const DISTILL_POOL: u64 = 0x03;
    pub const DISTILL_BATCH: u64 = 0x04;
    pub const TA_BATCH: u64 = 0x05;
    pub const GEN_BATCH: u64 = 0x06;
    pub const DRP_CHAIN: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const TEST: u64 = 0xFF;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // SplitMix64 finalizer.
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapses a key path into a single 64-bit stream key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut k = mix(seed ^ GOLDEN);
    for &p in path {
        k = mix(k.wrapping_add(GOLDEN) ^ p);
    }
    k
}

/// A counter-based random stream: `next` values are `mix(key + n*GOLDEN)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    ctr: u64,
}

impl RngStream {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        Self { key: derive_key(seed, path), ctr: 0 }
    }

    /// Stream positioned at draw `ctr`; lets callers address draws by index.
    pub fn at(seed: u64, path: &[u64], ctr: u64) -> Self {
        Self { key: derive_key(seed, path), ctr }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)));
        self.ctr += 1;
        v
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits, offset by half an ulp so 0 and 1 are excluded.
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller (branch-free, fixed consumption of two
    /// uniforms per draw).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Index uniform in [0, n).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free: the modulo bias at n << 2^64 is far below any
        // statistical resolution used here.
        (self.next_u64() % n as u64) as usize
    }
}

//! Deterministic RNG streams based on splitmix64.
//!
//! All randomness in the simulator flows through these streams so that runs
//! are reproducible across hosts and independent of how entities are
//! partitioned. Not cryptographically secure.

/// splitmix64 finalizer: a 64-bit mixing hash with full avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine hash inputs into one 64-bit stream key.
#[inline]
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut h = 0x5851_F42D_4C95_7F2Du64;
    for &p in parts {
        h = mix64(h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15));
    }
    h
}

/// Deterministic RNG with a single 64-bit state (splitmix64 sequence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream keyed by several inputs; same inputs, same stream.
    pub fn from_parts(parts: &[u64]) -> Self {
        Self::new(mix_key(parts))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform f64 in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    #[inline]
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, hi] inclusive.
    #[inline]
    pub fn range_u64_inclusive(&mut self, hi: u64) -> u64 {
        if hi == u64::MAX {
            return self.next_u64();
        }
        self.next_u64() % (hi + 1)
    }

    /// Bernoulli draw with probability `p`.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln() is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SimRng::new(42);
        let mut b = SimRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut rng = SimRng::new(7);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SimRng::new(123);
        let n = 200_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.next_normal();
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn keyed_streams_differ() {
        let a = SimRng::from_parts(&[1, 2, 3]).next_u64();
        let b = SimRng::from_parts(&[1, 2, 4]).next_u64();
        assert_ne!(a, b);
    }
}

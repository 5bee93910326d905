//! Counter-based normal generator used for weights and synthetic inputs.
//!
//! Every value is a pure function of `(seed, stream, index)`, so a tensor can
//! be regenerated element by element in any order and in any language that
//! implements SplitMix64 and Box-Muller.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    #[inline]
    fn raw(&self, counter: u64) -> u64 {
        mix64(self.key ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.raw(counter) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard normal sample for `counter` (Box-Muller on two derived uniforms).
    #[inline]
    pub fn normal(&self, counter: u64) -> f32 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn normal_vec(&self, len: usize, std: f32) -> Vec<f32> {
        (0..len as u64).map(|i| self.normal(i) * std).collect()
    }
}

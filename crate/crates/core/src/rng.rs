//! Deterministic random numbers.
//!
//! All stochastic draws go through [`NoiseRng`]: a ChaCha20 stream keyed by a
//! 64-bit seed plus a stream id, so identical seeds give identical sequences
//! on every platform. Standard normals come from the Box–Muller transform,
//!
//! ```text
//! u1 ∈ (0, 1], u2 ∈ [0, 1)
//! z0 = sqrt(-2 ln u1) · cos(2π u2)
//! z1 = sqrt(-2 ln u1) · sin(2π u2)
//! ```
//!
//! consuming two 53-bit uniforms per pair of normals, `z0` first.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

/// Stream used for the initial `x_T` draw of every sampler.
pub const STREAM_INIT: u64 = 0;
/// Stream used for per-step noise injected after initialization.
pub const STREAM_STEPS: u64 = 1;
/// Stream used by measurement noise in the forward model.
pub const STREAM_MEASUREMENT: u64 = 2;
/// Stream used when generating random operators (CS matrices, masks).
pub const STREAM_OPERATOR: u64 = 3;

#[derive(Clone, Debug)]
pub struct NoiseRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl NoiseRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // (0, 1] so the logarithm stays finite
        let u1 = ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normal_vec(n)).expect("length matches shape")
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    seed ^ (z ^ (z >> 31))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_identical_streams() {
        let mut a = NoiseRng::new(42, STREAM_INIT);
        let mut b = NoiseRng::new(42, STREAM_INIT);
        for _ in 0..100 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = NoiseRng::new(42, STREAM_INIT);
        let mut b = NoiseRng::new(42, STREAM_STEPS);
        let va = a.normal_vec(8);
        let vb = b.normal_vec(8);
        assert_ne!(va, vb);
    }

    #[test]
    fn normal_moments() {
        let mut rng = NoiseRng::new(7, 0);
        let n = 200_000;
        let v = rng.normal_vec(n);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn uniform_range() {
        let mut rng = NoiseRng::new(1, 0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mix_seed_spreads_indices() {
        assert_ne!(mix_seed(5, 0), mix_seed(5, 1));
        assert_eq!(mix_seed(5, 3), mix_seed(5, 3));
    }
}

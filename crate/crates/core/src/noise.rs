//! Deterministic Gaussian noise generation.
//!
//! The generator is pinned so experiments replay exactly: a ChaCha12 stream
//! cipher keyed by the 64-bit seed produces uniform 64-bit words, mapped to
//! standard normals with the Box-Muller transform. Given the same `(shape,
//! seed)` the output is bit-identical on every rerun. (The transform calls
//! `ln`/`sin`/`cos`, so bit equality across *platforms* additionally depends
//! on the system libm.)

use rand::{RngCore, SeedableRng};
pub use rand_chacha::ChaCha12Rng;

use crate::state::StateVector;

/// Uniform in [0, 1): top 53 bits of a ChaCha word.
fn uniform01(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One Box-Muller pair of independent standard normals.
fn normal_pair(rng: &mut ChaCha12Rng) -> (f64, f64) {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform01(rng);
    let u2 = uniform01(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Fill `out` with i.i.d. standard normal draws from `rng`.
pub fn fill_standard_normal(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    let mut i = 0;
    while i + 1 < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = a;
        out[i + 1] = b;
        i += 2;
    }
    if i < out.len() {
        out[i] = normal_pair(rng).0;
    }
}

/// Draw a vector of `n` standard normals from `rng`.
pub fn standard_normal_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    fill_standard_normal(rng, &mut out);
    out
}

/// A seeded ChaCha12 stream for noise and dataset generation.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Deterministic standard Gaussian state: a pure function of `(shape, seed)`.
pub fn gaussian_noise(shape: &[usize], seed: u64) -> StateVector {
    let mut rng = seeded_rng(seed);
    let mut state = StateVector::zeros(shape);
    let n = state.len();
    let mut data = vec![0.0; n];
    fill_standard_normal(&mut rng, &mut data);
    state = state.with_data_unchecked(data);
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gaussian_noise(&[64, 3], 17);
        let b = gaussian_noise(&[64, 3], 17);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = gaussian_noise(&[32], 1);
        let b = gaussian_noise(&[32], 2);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn moments_match_standard_normal() {
        let x = gaussian_noise(&[100_000], 7);
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn odd_length_works() {
        let x = gaussian_noise(&[7], 3);
        assert_eq!(x.len(), 7);
        assert!(x.all_finite());
    }
}

//! Deterministic random source shared by initialization, dataset synthesis,
//! drop masks, and pruning.
//!
//! The generator is pinned so that equal seeds give equal artifacts across
//! platforms and builds:
//!
//! * State seeding: four rounds of SplitMix64 over the user seed.
//! * Core stream: xoshiro256** (`next_u64`).
//! * Uniform doubles: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * Gaussians: one sample per call via the Box–Muller cosine branch,
//!   `z = sqrt(-2 ln u1) * cos(2π u2)` with `u1 ∈ (0, 1]`; each call
//!   consumes exactly two `u64` draws.
//!
//! The integer stream is bit-exact everywhere; the Gaussian transform is
//! additionally pinned by a golden-vector test at f32 precision.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to derive stage-scoped seeds from one run seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seeded deterministic generator (single-owner; clone to fork the stream).
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { state, seed }
    }

    /// The seed this generator was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator for a named sub-stream of `seed`. Stages use this so
    /// that inserting one stage never shifts another stage's stream.
    pub fn derive_seed(seed: u64, label: &str) -> u64 {
        let mut s = seed ^ fnv1a(label.as_bytes());
        splitmix64(&mut s)
    }

    /// Sub-stream scoped by label, derived from this generator's construction
    /// seed (not its current position), so derivation order never matters.
    pub fn derive(&self, label: &str) -> SeededRng {
        SeededRng::new(Self::derive_seed(self.seed, label))
    }

    /// xoshiro256** step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by scaling the 53-bit draw.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let v = (self.next_f64() * bound as f64) as usize;
        v.min(bound - 1)
    }

    /// Standard normal scaled by `std`; Box–Muller cosine branch.
    pub fn next_gaussian(&mut self, std: f64) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. `N(0, std²)` samples, drawn in row-major order.
pub fn gaussian_fill<S: Scalar>(shape: &[usize], rng: &mut SeededRng, std: f64) -> Result<Tensor<S>> {
    if std < 0.0 {
        return Err(Error::argument(format!("negative std {std}")));
    }
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| S::from_f64(rng.next_gaussian(std)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(8);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 2);
    }

    /// Frozen first outputs of the pinned generator for seed 42. These bytes
    /// define the stream for every artifact in the repository; do not change
    /// them without bumping the format version.
    #[test]
    fn golden_u64_stream_seed_42() {
        let mut rng = SeededRng::new(42);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                1546998764402558742,
                6990951692964543102,
                12544586762248559009,
                17057574109182124193,
            ]
        );
    }

    #[test]
    fn golden_gaussian_seed_42() {
        let mut rng = SeededRng::new(42);
        let t = gaussian_fill::<f32>(&[4], &mut rng, 1.0).unwrap();
        let golden = [-1.6132238f32, 0.781692, 0.015871294, 0.4772168];
        for (g, e) in t.data().iter().zip(golden) {
            assert!((g - e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn gaussian_std_zero_is_all_zeros() {
        let mut rng = SeededRng::new(3);
        let t = gaussian_fill::<f32>(&[3, 3], &mut rng, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_same_seed_identical_tensor() {
        let a = gaussian_fill::<f32>(&[2, 5], &mut SeededRng::new(11), 0.5).unwrap();
        let b = gaussian_fill::<f32>(&[2, 5], &mut SeededRng::new(11), 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_negative_std_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(gaussian_fill::<f32>(&[2], &mut rng, -0.1).is_err());
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = SeededRng::new(5);
        let t = gaussian_fill::<f64>(&[10_000], &mut rng, 2.0).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / 10_000.0;
        let var: f64 = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        assert_eq!(
            SeededRng::derive_seed(100, "stage-a"),
            SeededRng::derive_seed(100, "stage-a")
        );
        assert_ne!(
            SeededRng::derive_seed(100, "stage-a"),
            SeededRng::derive_seed(100, "stage-b")
        );
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let mut v1: Vec<u32> = (0..20).collect();
        let mut v2 = v1.clone();
        SeededRng::new(77).shuffle(&mut v1);
        SeededRng::new(77).shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut sorted = v1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}

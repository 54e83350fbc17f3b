//! Deterministic random number generation.
//!
//! Every stochastic choice in the library flows through [`SeededRng`], a thin
//! wrapper over the counter-based ChaCha8 stream cipher. The same seed yields
//! the same byte stream on every platform, which is what makes end-to-end
//! training runs reproducible bit-for-bit.
//!
//! Independent parts of a run (factor init, per-layer weight init, the joint
//! training loop) draw from *labeled* sub-streams derived from the master
//! seed, so adding draws to one part never perturbs another.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::DenseVector;

/// Serializable position of a generator: the seed it was built from plus the
/// number of 32-bit words consumed so far. `restore` rebuilds the exact
/// stream state with a seek, never by replaying draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Deterministic generator with labeled sub-streams.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sub-stream for a named purpose. Distinct labels give statistically
    /// independent streams; the derivation is pure, so callers can recreate
    /// any sub-stream from the master seed alone.
    pub fn labeled(seed: u64, label: &str) -> Self {
        SeededRng::new(splitmix64(seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(state.word_pos);
        SeededRng {
            seed: state.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1): the top 53 bits of a u64 scaled by 2^-53.
    pub fn next_unit_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit_f64()
    }

    /// Uniform integer in [0, bound) by rejection, free of modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below(0)");
        // Lemire's multiply-shift with rejection on the low word.
        let mut x = self.next_u64();
        let mut m = (x as u128) * (bound as u128);
        let mut lo = m as u64;
        if lo < bound {
            let threshold = bound.wrapping_neg() % bound;
            while lo < threshold {
                x = self.next_u64();
                m = (x as u128) * (bound as u128);
                lo = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Fisher-Yates shuffle, back to front.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller; one draw per call, the paired value
    /// is discarded to keep the draw count predictable.
    pub fn next_gaussian(&mut self) -> f64 {
        let mut u1 = self.next_unit_f64();
        while u1 == 0.0 {
            u1 = self.next_unit_f64();
        }
        let u2 = self.next_unit_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Bernoulli mask over `dim` positions: `true` marks a coordinate to keep,
/// `false` one to zero out. Rate 0 and 1 skip drawing entirely so corrupt-free
/// components consume no stream.
pub fn draw_mask(rng: &mut SeededRng, dim: usize, rate: f64) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![true; dim];
    }
    if rate >= 1.0 {
        return vec![false; dim];
    }
    (0..dim).map(|_| rng.next_unit_f64() >= rate).collect()
}

/// Masking corruption: zero each coordinate independently with probability
/// `rate`. Kept coordinates are NOT rescaled; the reconstruction target is
/// always the clean input.
pub fn mask_corrupt(rng: &mut SeededRng, x: &DenseVector, rate: f64) -> DenseVector {
    let mask = draw_mask(rng, x.dim(), rate);
    apply_mask(x, &mask)
}

/// Apply a precomputed keep-mask.
pub fn apply_mask(x: &DenseVector, mask: &[bool]) -> DenseVector {
    debug_assert_eq!(x.dim(), mask.len());
    DenseVector::from_vec(
        x.as_slice()
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_labels_differ() {
        let mut a = SeededRng::labeled(42, "factors");
        let mut b = SeededRng::labeled(42, "train");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn restore_resumes_exactly() {
        let mut a = SeededRng::new(7);
        for _ in 0..13 {
            a.next_u64();
        }
        a.next_unit_f64();
        let st = a.state();
        let mut b = SeededRng::restore(st);
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn unit_f64_in_range() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let v = rng.next_unit_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let mut rng = SeededRng::new(1);
        let before = rng.state();
        let x = DenseVector::from_vec(vec![1.0, -2.0, 3.5]);
        let y = mask_corrupt(&mut rng, &x, 0.0);
        assert_eq!(y.as_slice(), x.as_slice());
        // rate 0 must not consume the stream
        assert_eq!(rng.state(), before);
    }

    #[test]
    fn mask_rate_one_zeroes_everything() {
        let mut rng = SeededRng::new(1);
        let x = DenseVector::from_vec(vec![1.0, -2.0, 3.5]);
        let y = mask_corrupt(&mut rng, &x, 1.0);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_fraction_tracks_rate() {
        let mut rng = SeededRng::new(99);
        let x = DenseVector::from_vec(vec![1.0; 100_000]);
        let y = mask_corrupt(&mut rng, &x, 0.3);
        let zeroed = y.as_slice().iter().filter(|&&v| v == 0.0).count();
        let frac = zeroed as f64 / 100_000.0;
        assert!((0.29..=0.31).contains(&frac), "zeroed fraction {frac}");
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = SeededRng::new(5);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let g = rng.next_gaussian();
            sum += g;
            sumsq += g * g;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation_and_deterministic() {
        let mut rng = SeededRng::new(11);
        let mut v: Vec<u32> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());

        let mut rng2 = SeededRng::new(11);
        let mut v2: Vec<u32> = (0..100).collect();
        rng2.shuffle(&mut v2);
        assert_eq!(v, v2);
    }

    proptest! {
        #[test]
        fn next_below_stays_in_bound(seed in 0u64..500, bound in 1u64..1000) {
            let mut rng = SeededRng::new(seed);
            for _ in 0..64 {
                prop_assert!(rng.next_below(bound) < bound);
            }
        }

        #[test]
        fn mask_never_rescales(seed in 0u64..200, rate in 0.0f64..1.0) {
            let mut rng = SeededRng::new(seed);
            let x = DenseVector::from_vec((0..32).map(|i| i as f64 + 0.5).collect());
            let y = mask_corrupt(&mut rng, &x, rate);
            for i in 0..32 {
                prop_assert!(y[i] == 0.0 || y[i] == x[i]);
            }
        }
    }
}

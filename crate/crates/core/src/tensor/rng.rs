use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Vector;

/// Reproducible random stream: ChaCha8 keyed from a `u64` seed, with normals
/// produced by the basic Box–Muller transform
/// `z₀ = √(−2 ln u₁)·cos 2πu₂`, `z₁ = √(−2 ln u₁)·sin 2πu₂` where
/// `u₁ ∈ (0,1]` and `u₂ ∈ [0,1)` are 53-bit uniforms. The sine branch is
/// kept as a spare and returned by the next call.
///
/// ChaCha's output is defined bytewise, so a seed yields the same stream on
/// every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Everything needed to resume a [`SeededRng`] exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
    pub spare: Option<f64>,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream keyed by `(seed, index)`; does not advance `self`.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x9E37_79B9))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
            spare: self.spare,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(state.word_pos);
        SeededRng {
            seed: state.seed,
            inner,
            spare: state.spare,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_M53
    }

    /// Uniform integer in `0..n` (Lemire's widening multiply with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn standard_normal(&mut self, n: usize) -> Vector {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

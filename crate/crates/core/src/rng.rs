//! Portable, fully specified random number generation.
//!
//! Every random quantity in this crate is derived from xoshiro256** whose
//! 256-bit state is expanded from a `u64` seed by SplitMix64 (the reference
//! seeding procedure of the xoshiro authors). On top of the raw stream:
//!
//! * `uniform()` = `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`.
//! * `normal()` = `sqrt(-2 ln(1 - u₁)) · cos(2π u₂)` (Box-Muller, cosine
//!   branch only; two uniforms per draw). `ln`/`cos` come from `libm` so the
//!   bits do not depend on the platform math library.
//! * `below(n)` = high 64 bits of `next_u64 · n` (multiply-shift, no
//!   rejection).
//! * `shuffle` is Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! Independent streams for different purposes come from [`Rng::derive`].

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

/// Stream tags for [`Rng::derive`].
pub mod stream {
    pub const CLASS_DIRECTIONS: u64 = 1;
    pub const SIGNAL: u64 = 2;
    pub const DISTRACTOR: u64 = 3;
    pub const MIXING: u64 = 4;
    pub const LABELS: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const SPLITS: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
    pub const AUX_INIT: u64 = 9;
    pub const BATCHES: u64 = 10;
    pub const PROBE_INIT: u64 = 11;
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Generator for sub-stream `tag` of `seed`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Row-major matrix of standard normals.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches")
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * self.uniform())
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches")
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Reproducible matrix generation.
//!
//! Entries come from SplitMix64 (Steele, Lea & Flood): the state advances by
//! `0x9E3779B97F4A7C15` and each output is finalised with the usual
//! `(z ^ z>>30) * 0xBF58476D1CE4E5B9`, `(z ^ z>>27) * 0x94D049BB133111EB`,
//! `z ^ z>>31` mix. The top 53 bits of each output map to `u ∈ [0, 1)`, and
//! the entry is `2u − 1`. Entries are drawn in row-major order.

use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_signed_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }
}

/// Seeded `rows × cols` matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.next_signed_unit())
}

/// Seeded upper-triangular `n × n` matrix.
pub fn random_upper_triangular(n: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(n, n, |i, j| {
        let v = rng.next_signed_unit();
        if i <= j {
            v
        } else {
            0.0
        }
    })
}

//! Dense matrices, a reverse-mode tape over them, and a finite-difference
//! gradient checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, Probe, DEFAULT_STEP, REL_FLOOR};
pub use matrix::{checksum_all, topk_indices, Matrix};
pub use tape::{Gradients, Tape, Var};

pub(crate) use matrix::hex;

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Independent deterministic stream for `(seed, tags...)`.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix with entries drawn from N(0, std²).
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

//! Seed derivation and reproducible random draws.
//!
//! Every random stage derives its own ChaCha stream from a root seed plus a
//! tag (and optionally an index), so results never depend on how much
//! randomness another stage consumed or on scheduling order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;

/// Mix a root seed with a stage tag into an independent stream seed
/// (FNV-1a over the tag, then a splitmix64 finalizer).
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fresh stream for `tag` under `root`.
pub fn stream(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}

/// A fresh stream for the `index`-th run of a tagged stage.
pub fn indexed_stream(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag).wrapping_add(index))
}

/// Matrix of i.i.d. N(0, std^2) draws.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("normal draws are finite")
}

/// Matrix of i.i.d. U(-half_range, half_range) draws.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, half_range: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-half_range..half_range))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("uniform draws are finite")
}

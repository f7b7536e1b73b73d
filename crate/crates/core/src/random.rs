//! Seeded random generation. All randomness in the crate flows through
//! `ChaCha8Rng` so that results are identical across platforms and thread
//! counts.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::linalg::Matrix;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit hash of a string (first eight bytes of its SHA-256).
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Per-layer seed: `seed XOR hash(layer name)`.
pub fn layer_seed(seed: u64, layer: &str) -> u64 {
    seed ^ stable_hash(layer)
}

/// Seed for a named stream inside a layer (probes, generators).
pub fn stream_seed(seed: u64, layer: &str, stream: &str) -> u64 {
    seed ^ stable_hash(&format!("{layer}\u{1f}{stream}"))
}

/// Seed of the `index`-th instance of a batch.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed ^ stable_hash(&format!("instance\u{1f}{index}"))
}

/// `rows × cols` matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}

/// `len` i.i.d. samples from the open interval (0, 1).
pub fn uniform_open(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(Open01)).collect()
}

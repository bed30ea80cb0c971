//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream seeded either
//! directly or through [`derive_seed`], which hashes (master seed, label,
//! index) so that independent pipeline stages and samples get independent,
//! reproducible streams regardless of evaluation order or worker count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

pub fn stream_from_seed(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream for (master, label, index).
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

pub fn derive_stream(master: u64, label: &str, index: u64) -> Stream {
    stream_from_seed(derive_seed(master, label, index))
}

/// Normal(0, std) resampled until within two standard deviations.
pub fn truncated_normal(rng: &mut Stream, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Tensor of truncated-normal draws, quantized to the f32 lattice so that
/// freshly initialized parameters serialize losslessly.
pub fn trunc_normal_tensor(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut t = Tensor::from_vec(shape, (0..n).map(|_| truncated_normal(rng, std)).collect())
        .expect("shape/data agree");
    t.quantize_f32();
    t
}

/// Uniform in [lo, hi).
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Uniform integer in [lo, hi] inclusive.
pub fn uniform_int(rng: &mut Stream, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Log-uniform in [lo, hi], lo > 0.
pub fn log_uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

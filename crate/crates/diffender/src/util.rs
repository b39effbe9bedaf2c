//! Shared numeric helpers: seeded RNG derivation, percentiles, PSNR.

use ndarray::{Array3, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a master seed and a purpose tag.
///
/// Different tags give statistically independent streams, so stages can be
/// reordered or skipped without perturbing each other's randomness.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}

/// Derive a sub-seed (for passing to operations that take `seed: u64`).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Nearest-rank percentile: value at index `floor(q * (n - 1))` of the sorted
/// data. `q` in [0, 1]. Panics on empty input.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
/// Returns +inf for identical inputs.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Clamp every element into [lo, hi] in place.
pub fn clamp_inplace<F: NdFloat>(x: &mut ndarray::ArrayD<F>, lo: F, hi: F) {
    x.mapv_inplace(|v| v.max(lo).min(hi));
}

/// Mean of an f32 slice as f64.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Short hex digest of arbitrary bytes, for cache keys and provenance stamps.
pub fn short_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

//! Seed derivation and deterministic sampling helpers.
//!
//! Every stochastic operation in the crate draws from a [`ChaCha8Rng`]
//! seeded by [`derive_seed`], so a run's behavior depends only on its root
//! seed and a stable purpose tag — never on execution order or thread
//! count. Resuming a run re-derives the same streams.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a root seed, a purpose tag, and an index.
pub fn derive_seed(root: u64, tag: &str, idx: u64) -> u64 {
    let mut h = splitmix64(root);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ idx)
}

/// Deterministic RNG for a (root, tag, idx) triple.
pub fn rng_for(root: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, idx))
}

/// One standard-normal sample via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f32 {
    // Uniform in (0, 1]: avoids ln(0).
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Fill a slice with N(0, scale^2) samples.
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f32], scale: f32) {
    for v in out.iter_mut() {
        *v = normal(rng) * scale;
    }
}

/// Sample an index from unnormalized non-negative weights.
///
/// Falls back to the last index on accumulated rounding.
pub fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f32]) -> usize {
    let total: f64 = weights.iter().map(|&w| f64::from(w.max(0.0))).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= f64::from(w.max(0.0));
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        let a = derive_seed(7, "prefix", 0);
        let b = derive_seed(7, "prefix", 0);
        let c = derive_seed(7, "prefix", 1);
        let d = derive_seed(7, "delta", 0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = rng_for(3, "normal-test", 0);
        let n = 20_000;
        let samples: Vec<f32> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = samples.iter().sum::<f32>() / n as f32;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn weighted_sampling_respects_zero_weights() {
        let mut rng = rng_for(5, "weights", 0);
        for _ in 0..100 {
            let i = sample_weighted(&mut rng, &[0.0, 1.0, 0.0]);
            assert_eq!(i, 1);
        }
    }
}

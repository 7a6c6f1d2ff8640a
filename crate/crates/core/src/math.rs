//! Float helpers for `no_std` and deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// SplitMix64 finalizer. Used to combine seeds with ids.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a string, for keying seeds on labels and image ids.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a sequence of keys.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(base), |acc, k| mix64(acc ^ mix64(*k)))
}

pub fn rng_for(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, keys))
}

/// Maps a 64-bit hash to a uniform value in [0, 1).
#[inline]
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `ceil(fraction * n)` that does not round up representation noise
/// (0.015 * 1000 is 15.000000000000002 in binary floating point).
pub fn budget_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let nearest = round(exact);
    if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest as usize
    } else {
        ceil(exact) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_count_absorbs_float_noise() {
        assert_eq!(budget_count(0.015, 1000), 15);
        assert_eq!(budget_count(0.015, 1001), 16);
        assert_eq!(budget_count(1.0, 7), 7);
        assert_eq!(budget_count(0.5, 0), 0);
    }

    #[test]
    fn derived_seeds_differ_per_key() {
        assert_ne!(derive_seed(1, &[2]), derive_seed(1, &[3]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }
}

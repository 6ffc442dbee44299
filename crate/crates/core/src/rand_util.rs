//! Seeded sampling helpers shared by the synthetic generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Box-Muller standard normal. Kept local so generated artifacts depend only
/// on the seed, not on an external sampler's internals.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Derive a child seed from a base seed and a path of indices, so unrelated
/// parts of a generated stream draw from independent deterministic streams.
pub fn child_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h
}

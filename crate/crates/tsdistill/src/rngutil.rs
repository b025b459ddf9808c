//! Seeded randomness helpers. Everything draws through `next_u64` with fixed
//! arithmetic (no rejection loops), so the word stream a checkpoint restores
//! replays identically.

use rand_core::RngCore;

/// Uniform f64 in [0, 1) with 53 mantissa bits.
#[inline]
pub fn u01(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform f64 in [lo, hi).
#[inline]
pub fn uniform(rng: &mut (impl RngCore + ?Sized), lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * u01(rng)
}

/// Uniform integer in [0, n). n must be >= 1.
#[inline]
pub fn rand_below(rng: &mut (impl RngCore + ?Sized), n: usize) -> usize {
    debug_assert!(n >= 1);
    let v = (u01(rng) * n as f64) as usize;
    v.min(n - 1)
}

/// Standard normal via Box-Muller.
#[inline]
pub fn gaussian(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    let u1 = 1.0 - u01(rng); // (0, 1]: keeps ln finite
    let u2 = u01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

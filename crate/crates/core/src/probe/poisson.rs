//! Exact Poisson sampling with a fixed, platform-independent algorithm.
//!
//! Uniform deviates are built from the top 53 bits of one `u64` draw:
//! `u = (x >> 11) · 2⁻⁵³ ∈ [0, 1)`.
//!
//! * `λ = 0` returns 0 without consuming randomness.
//! * `0 < λ < 10` uses sequential-search inversion: one uniform `u`, then
//!   `k = min{k : F(k) > u}` with `p₀ = e^{−λ}`, `p_k = p_{k−1} λ / k`.
//! * `λ ≥ 10` uses Hörmann's transformed rejection with squeeze (PTRS) with
//!   constants `b = 0.931 + 2.53 √λ`, `a = −0.059 + 0.02483 b`,
//!   `1/α = 1.1239 + 1.1328/(b − 3.4)`, `v_r = 0.9277 − 3.6224/(b − 2)`,
//!   and acceptance test
//!   `ln V + ln(1/α) − ln(a/us² + b) ≤ −λ + k ln λ − ln k!`.
//!   `ln k!` comes from [`ln_factorial`]: a table for `k < 10`, otherwise the
//!   Stirling series with five correction terms.
//!
//! Only IEEE-754 basic arithmetic plus `exp`, `ln` and `sqrt` are involved, so
//! the output for a given generator state is reproducible across platforms
//! whose libm rounds these correctly.

use rand::RngCore;

/// Inversion is used below this mean, PTRS at or above it.
pub const INVERSION_LIMIT: f64 = 10.0;

#[inline]
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One Poisson draw with mean `lambda` (finite, non-negative).
pub fn sample<R: RngCore + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    debug_assert!(lambda >= 0.0 && lambda.is_finite());
    if lambda <= 0.0 {
        0
    } else if lambda < INVERSION_LIMIT {
        inversion(rng, lambda)
    } else {
        ptrs(rng, lambda)
    }
}

fn inversion<R: RngCore + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    let u = unit_f64(rng);
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0u32;
    // the tail beyond k = 1000 is far below 2⁻⁵³ for λ < 10
    while u >= cdf && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

fn ptrs<R: RngCore + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = unit_f64(rng) - 0.5;
        let v = unit_f64(rng);
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u32;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u32;
        }
    }
}

/// `ln k!`.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_146,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
        10.604_602_902_745_25,
        12.801_827_480_081_469,
    ];
    if k < 10 {
        return TABLE[k as usize];
    }
    // ln Γ(n) with n = k + 1, Stirling series with Bernoulli corrections
    let n = k as f64 + 1.0;
    let inv = 1.0 / n;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
    (n - 0.5) * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

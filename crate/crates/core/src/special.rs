//! Gamma-family functions used by the Dirichlet losses and scores.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// ψ₁(x) for x > 0: upward recurrence to x ≥ 10, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/2x² + Σ B_{2k}/x^{2k+1}
    let series = inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
    acc + inv + 0.5 * inv2 + inv * series
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn known_values() {
        assert_relative_eq!(trigamma(1.0), PI * PI / 6.0, max_relative = 1e-13);
        assert_relative_eq!(trigamma(0.5), PI * PI / 2.0, max_relative = 1e-13);
        assert_relative_eq!(trigamma(2.0), PI * PI / 6.0 - 1.0, max_relative = 1e-13);
        assert!(trigamma(0.0).is_nan());
    }

    #[test]
    fn matches_digamma_difference() {
        for &x in &[0.05f64, 0.7, 1.3, 4.0, 9.5, 40.0, 1e3] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.3, 1.0, 2.5, 17.0] {
            assert_relative_eq!(digamma(x + 1.0), digamma(x) + 1.0 / x, max_relative = 1e-12);
        }
    }
}

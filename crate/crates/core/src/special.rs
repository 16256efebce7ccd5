//! Special functions used by the mixing families.

use statrs::function::gamma as sg;

pub use statrs::function::gamma::{digamma, gamma, ln_gamma};

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    sg::gamma_lr(a, x)
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    sg::gamma_ur(a, x)
}

/// Trigamma function ψ'(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    // Asymptotic expansion with Bernoulli numbers.
    let tail = 1.0 / x
        + r / 2.0
        + r / x
            * (1.0 / 6.0
                - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * 5.0 / 66.0))));
    acc + tail
}

/// Solves ψ(a) = y for a > 0 by safeguarded Newton iteration.
///
/// Returns `None` when neither Newton nor the bracketed bisection fallback
/// converges.
pub fn inverse_digamma(y: f64) -> Option<f64> {
    if !y.is_finite() {
        return None;
    }
    // Minka's starting point.
    let mut a = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + 0.577_215_664_901_532_9)
    };
    for _ in 0..100 {
        let step = (digamma(a) - y) / trigamma(a);
        let mut next = a - step;
        if next <= 0.0 {
            next = a / 2.0;
        }
        if (next - a).abs() <= 1e-14 * a.max(1e-300) {
            return Some(next);
        }
        a = next;
    }
    // Bisection on a bracket; ψ is increasing on (0, ∞).
    let (mut lo, mut hi) = (1e-300_f64, 1.0_f64);
    while digamma(hi) < y {
        hi *= 2.0;
        if hi > 1e300 {
            return None;
        }
    }
    for _ in 0..2000 {
        let mid = if hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        if digamma(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            return Some(0.5 * (lo + hi));
        }
    }
    None
}

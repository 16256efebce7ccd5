//! Complex scalar kernels: accurate `expm1`/`log1p` and divided differences.

use num_complex::Complex64;

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// `exp(z) - 1` without cancellation for small `|z|`.
pub fn expm1(z: Complex64) -> Complex64 {
    if z.norm() < 0.5 {
        let mut term = z;
        let mut sum = z;
        for k in 2..40 {
            term = term * z / k as f64;
            sum += term;
            if term.norm() <= 1e-17 * sum.norm() {
                break;
            }
        }
        sum
    } else {
        z.exp() - ONE
    }
}

/// `ln(1 + u)` (principal branch) without cancellation for small `|u|`.
pub fn log1p(u: Complex64) -> Complex64 {
    if u.norm() < 0.5 {
        // ln(1+u) = 2 atanh(w), w = u / (2 + u), |w| <= 1/3.
        let w = u / (u + 2.0);
        let w2 = w * w;
        let mut term = w;
        let mut sum = w;
        for k in 1..60 {
            term *= w2;
            let add = term / (2 * k + 1) as f64;
            sum += add;
            if add.norm() <= 1e-17 * sum.norm() {
                break;
            }
        }
        sum * 2.0
    } else {
        (ONE + u).ln()
    }
}

/// Divided difference of `exp` at `a`, `b`: `(e^a - e^b) / (a - b)`, and
/// `e^a` when the points coincide.
pub fn dd_exp(a: Complex64, b: Complex64) -> Complex64 {
    let d = a - b;
    if d.norm() < 1.0 {
        if d.norm() == 0.0 {
            return a.exp();
        }
        b.exp() * expm1(d) / d
    } else {
        (a.exp() - b.exp()) / d
    }
}

/// Divided difference of the principal power `z ↦ z^s` at `z1`, `z2`.
///
/// Both points must avoid the closed negative real axis.
pub fn dd_pow(z1: Complex64, z2: Complex64, s: Complex64) -> Complex64 {
    let diff = z1 - z2;
    let scale = z1.norm().max(z2.norm());
    if diff.norm() > 0.5 * scale {
        return ((s * z1.ln()).exp() - (s * z2.ln()).exp()) / diff;
    }
    if diff.norm() == 0.0 {
        return s * (s * z2.ln()).exp() / z2;
    }
    // z1/z2 = e^d with |d| small: (z1^s - z2^s)/(z1 - z2) = z2^(s-1) expm1(s d)/expm1(d).
    let d = log1p(diff / z2);
    let z2_pow = ((s - 1.0) * z2.ln()).exp();
    z2_pow * expm1(s * d) / expm1(d)
}

/// Divided difference of the principal logarithm at `z1`, `z2`.
pub fn dd_log(z1: Complex64, z2: Complex64) -> Complex64 {
    let diff = z1 - z2;
    let scale = z1.norm().max(z2.norm());
    if diff.norm() > 0.5 * scale {
        return (z1.ln() - z2.ln()) / diff;
    }
    if diff.norm() == 0.0 {
        return ONE / z2;
    }
    let d = log1p(diff / z2);
    d / (z2 * expm1(d))
}

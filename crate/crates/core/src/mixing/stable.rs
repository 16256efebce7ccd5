//! Standard positive stable law with Laplace transform `exp(−s^α)`,
//! `0 < α < 1`.
//!
//! Density and distribution function use Zolotarev's integral
//! representation over the angle φ ∈ (0, π). The integrand is sharply
//! peaked for extreme arguments, so the Gauss–Legendre rule is placed on
//! the window where the log-integrand is within `WINDOW` of its maximum.
//! Far in the right tail the convergent power series is used instead.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::Exp1;

use crate::quad;
use crate::special::{gamma, ln_gamma};

/// Nodes per half-window; 200 in total.
const HALF_NODES: usize = 100;
/// Log-integrand drop that delimits the window.
const WINDOW: f64 = 42.0;
/// Below this value of `x^{−α}` the tail series is used.
const SERIES_Z: f64 = 0.3;

fn unit_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| quad::gauss_legendre(HALF_NODES))
}

/// `ln A(φ)` for Zolotarev's function
/// `A(φ) = (sin αφ / sin φ)^{1/(1−α)} · sin((1−α)φ) / sin(αφ)`.
pub fn ln_zolotarev(phi: f64, alpha: f64) -> f64 {
    if phi <= 0.0 {
        return alpha / (1.0 - alpha) * alpha.ln() + (1.0 - alpha).ln();
    }
    let (sa, s1, sb) = ((alpha * phi).sin(), phi.sin(), ((1.0 - alpha) * phi).sin());
    (sa.ln() - s1.ln()) / (1.0 - alpha) + sb.ln() - sa.ln()
}

/// Integrates `exp(g(φ))` over (0, π) for a unimodal `g` with maximum at
/// `peak`, returning the logarithm of the integral.
fn ln_integral(g: impl Fn(f64) -> f64, peak: f64) -> f64 {
    let top = g(peak);
    let threshold = top - WINDOW;
    // Point between `inside` and `outside` where g falls to the threshold.
    let edge = |inside: f64, outside: f64| {
        if g(outside) >= threshold {
            return outside;
        }
        let (mut a, mut b) = (inside, outside);
        for _ in 0..64 {
            let mid = 0.5 * (a + b);
            if g(mid) >= threshold {
                a = mid;
            } else {
                b = mid;
            }
        }
        b
    };
    let left = if peak > 0.0 { edge(peak, 0.0) } else { 0.0 };
    let right = if peak < PI { edge(peak, PI) } else { PI };
    let (x, w) = unit_rule();
    let mut terms = Vec::with_capacity(2 * HALF_NODES);
    for (a, b) in [(left, peak), (peak, right)] {
        if b <= a {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (xi, wi) in x.iter().zip(w) {
            terms.push((wi * half).ln() + g(mid + half * xi));
        }
    }
    log_sum_exp(&terms)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Angle at which `ln A(φ) = target`; `A` increases on (0, π).
fn solve_angle(alpha: f64, target: f64) -> f64 {
    let (mut a, mut b) = (0.0, PI);
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        if ln_zolotarev(mid, alpha) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

fn tail_terms(alpha: f64, z: f64, density: bool) -> f64 {
    // Σ (−1)^{k+1} c_k sin(kπα) z^k / π with c_k = Γ(kα+1)/k! for the
    // density (times x^{−1}) and Γ(kα)/k! for the survival function.
    let mut sum = 0.0;
    for k in 1..80 {
        let kf = k as f64;
        let ln_c = if density { ln_gamma(kf * alpha + 1.0) } else { ln_gamma(kf * alpha) } - ln_gamma(kf + 1.0);
        let size = (ln_c + kf * z.ln()).exp();
        let term = size * (kf * PI * alpha).sin();
        sum += if k % 2 == 1 { term } else { -term };
        // Test the magnitude without the sine, which vanishes for some k.
        if size <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum / PI
}

/// Log density of the standard positive stable law at `x > 0`.
pub fn ln_density(x: f64, alpha: f64) -> f64 {
    let z = x.powf(-alpha);
    if z < SERIES_Z {
        return tail_terms(alpha, z, true).ln() - x.ln();
    }
    let r = 1.0 / (1.0 - alpha);
    let ln_k = -alpha * r * x.ln();
    let k = ln_k.exp();
    // The integrand A e^{−KA} peaks where A = 1/K.
    let peak = if ln_zolotarev(0.0, alpha) + ln_k >= 0.0 { 0.0 } else { solve_angle(alpha, -ln_k) };
    let g = |phi: f64| {
        let la = ln_zolotarev(phi, alpha);
        la - k * la.exp()
    };
    (alpha * r).ln() - r * x.ln() - PI.ln() + ln_integral(g, peak)
}

pub fn density(x: f64, alpha: f64) -> f64 {
    ln_density(x, alpha).exp()
}

/// `ln P(Θ ≤ x)`.
pub fn ln_cdf(x: f64, alpha: f64) -> f64 {
    let k = x.powf(-alpha / (1.0 - alpha));
    let g = |phi: f64| -k * ln_zolotarev(phi, alpha).exp();
    ln_integral(g, 0.0) - PI.ln()
}

pub fn cdf(x: f64, alpha: f64) -> f64 {
    if x.powf(-alpha) < SERIES_Z {
        1.0 - survival(x, alpha)
    } else {
        ln_cdf(x, alpha).exp()
    }
}

pub fn survival(x: f64, alpha: f64) -> f64 {
    let z = x.powf(-alpha);
    if z < SERIES_Z {
        tail_terms(alpha, z, false)
    } else {
        -ln_cdf(x, alpha).exp_m1()
    }
}

/// Kanter's representation: `(A(U)/E)^{(1−α)/α}`, `U ~ U(0, π)`, `E ~ Exp(1)`.
pub fn sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u = rng.random::<f64>() * PI;
        if u > 0.0 {
            break u;
        }
    };
    let e: f64 = rng.sample(Exp1);
    ((ln_zolotarev(u, alpha) - e.ln()) * (1.0 - alpha) / alpha).exp()
}

/// `E[Θ^{−ν}] = Γ(1 + ν/α) / Γ(1 + ν)`.
pub fn neg_moment(nu: f64, alpha: f64) -> f64 {
    gamma(1.0 + nu / alpha) / gamma(1.0 + nu)
}

//! Shared fixtures for unit tests.

use nalgebra::RowDVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matfun::Matrix;
use crate::quad;
use crate::phasetype::{PhParams, SubIntensity};

/// Coxian with rates uniform on [0.2, 2] and a random initial law.
pub fn random_coxian(rng: &mut ChaCha8Rng, p: usize) -> PhParams {
    let mut t = Matrix::zeros(p, p);
    for i in 0..p {
        let exit = rng.random_range(0.2..2.0);
        let fwd = if i + 1 < p { rng.random_range(0.2..2.0) } else { 0.0 };
        if i + 1 < p {
            t[(i, i + 1)] = fwd;
        }
        t[(i, i)] = -(exit + fwd);
    }
    PhParams::new(random_pi(rng, p), SubIntensity::new(t).unwrap()).unwrap()
}

/// Fully populated sub-intensity matrix.
pub fn random_general(rng: &mut ChaCha8Rng, p: usize) -> PhParams {
    let mut t = Matrix::zeros(p, p);
    for i in 0..p {
        let mut total = rng.random_range(0.2..2.0);
        for j in 0..p {
            if i != j {
                let v = rng.random_range(0.0..1.5);
                t[(i, j)] = v;
                total += v;
            }
        }
        t[(i, i)] = -total;
    }
    PhParams::new(random_pi(rng, p), SubIntensity::new(t).unwrap()).unwrap()
}

pub fn random_pi(rng: &mut ChaCha8Rng, p: usize) -> RowDVector<f64> {
    let w = RowDVector::from_fn(p, |_, _| rng.random_range(0.05..1.0));
    let s = w.sum();
    w / s
}

pub fn exponential(rate: f64) -> PhParams {
    PhParams::from_parts(&[1.0], &[-rate]).unwrap()
}

pub fn erlang(k: usize, rate: f64) -> PhParams {
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = -rate;
        if i + 1 < k {
            t[(i, i + 1)] = rate;
        }
    }
    let mut pi = RowDVector::zeros(k);
    pi[0] = 1.0;
    PhParams::new(pi, SubIntensity::new(t).unwrap()).unwrap()
}

/// Kolmogorov–Smirnov distance between a sample and a CDF.
pub fn ks_distance(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    sample.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}

/// ∫ g(x) dx over [e^lo, e^hi] through x = e^u, in unit panels of u.
pub fn integrate_log(g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let mut acc = 0.0;
    let mut u = lo;
    while u < hi {
        let (v, _) = quad::integrate(|u| g(u.exp()) * u.exp(), u, (u + 1.0).min(hi), 1e-16, 1e-13);
        acc += v;
        u += 1.0;
    }
    acc
}

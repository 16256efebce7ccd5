//! User-supplied scaling densities.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::QuadratureRule;
use crate::error::{Error, Result};
use crate::quad;
use crate::special::{gamma_p, gamma_q, ln_gamma};

/// Panels used to tabulate the distribution function of custom densities.
const CUSTOM_PANELS: usize = 4096;
/// Allowed deviation of the total mass from one.
const NORMALIZATION_TOL: f64 = 1e-6;

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum GenericSource {
    /// Gamma law with the given shape and rate.
    ScaledGamma { shape: f64, rate: f64 },
    /// Piecewise-linear density through `(theta[i], density[i])`.
    Tabulated { theta: Vec<f64>, density: Vec<f64> },
    /// Arbitrary density on `[lo, hi]`.
    Custom(DensityFn),
}

impl fmt::Debug for GenericSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenericSource::ScaledGamma { shape, rate } => {
                f.debug_struct("ScaledGamma").field("shape", shape).field("rate", rate).finish()
            }
            GenericSource::Tabulated { theta, .. } => {
                f.debug_struct("Tabulated").field("knots", &theta.len()).finish()
            }
            GenericSource::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Cumulative masses at the knots of a piecewise description.
#[derive(Debug)]
struct CdfTable {
    knots: Vec<f64>,
    cum: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GenericDensity {
    source: GenericSource,
    lo: f64,
    hi: f64,
    table: Option<Arc<CdfTable>>,
    rule: Arc<OnceLock<QuadratureRule>>,
}

impl GenericDensity {
    /// Gamma(shape, rate) on (0, ∞).
    pub fn scaled_gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma shape and rate must be positive, got ({shape}, {rate})"
            )));
        }
        Ok(GenericDensity {
            source: GenericSource::ScaledGamma { shape, rate },
            lo: 0.0,
            hi: f64::INFINITY,
            table: None,
            rule: Arc::default(),
        })
    }

    /// Piecewise-linear density; knots strictly increasing and nonnegative.
    pub fn tabulated(theta: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 || theta.len() != density.len() {
            return Err(Error::invalid("tabulated density needs at least two (theta, density) pairs"));
        }
        if theta[0] < 0.0 || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("tabulated knots must be finite and nonnegative"));
        }
        if let Some(i) = theta.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("tabulated knots not increasing at row {}", i + 1)));
        }
        if let Some(i) = density.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid(format!("tabulated density at row {i} is negative or not finite")));
        }
        let mut cum = vec![0.0; theta.len()];
        for i in 1..theta.len() {
            cum[i] = cum[i - 1] + 0.5 * (theta[i] - theta[i - 1]) * (density[i] + density[i - 1]);
        }
        let (lo, hi) = (theta[0], theta[theta.len() - 1]);
        let table = CdfTable { knots: theta.clone(), cum };
        Self::checked(GenericSource::Tabulated { theta, density }, lo, hi, table)
    }

    /// Arbitrary density supported on `[lo, hi]`, `0 ≤ lo < hi < ∞`.
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static, lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::invalid(format!("custom density support [{lo}, {hi}] is not a bounded interval")));
        }
        let f: DensityFn = Arc::new(f);
        let (x, w) = quad::gauss_legendre(5);
        let h = (hi - lo) / CUSTOM_PANELS as f64;
        let knots: Vec<f64> = (0..=CUSTOM_PANELS).map(|i| lo + h * i as f64).collect();
        let mut cum = vec![0.0; knots.len()];
        for i in 0..CUSTOM_PANELS {
            let mid = knots[i] + 0.5 * h;
            let mass: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + 0.5 * h * xi)).sum::<f64>() * 0.5 * h;
            if !(mass.is_finite() && mass >= 0.0) {
                return Err(Error::invalid(format!("custom density is negative or not finite near {mid}")));
            }
            cum[i + 1] = cum[i] + mass;
        }
        Self::checked(GenericSource::Custom(f), lo, hi, CdfTable { knots, cum })
    }

    fn checked(source: GenericSource, lo: f64, hi: f64, table: CdfTable) -> Result<Self> {
        let total = *table.cum.last().expect("table is non-empty");
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!("density integrates to {total}, not 1")));
        }
        Ok(GenericDensity { source, lo, hi, table: Some(Arc::new(table)), rule: Arc::default() })
    }

    pub fn source(&self) -> &GenericSource {
        &self.source
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn density(&self, theta: f64) -> f64 {
        if theta < self.lo || theta > self.hi {
            return 0.0;
        }
        match &self.source {
            GenericSource::ScaledGamma { shape, rate } => {
                if theta == 0.0 {
                    return 0.0;
                }
                (shape * rate.ln() + (shape - 1.0) * theta.ln() - rate * theta - ln_gamma(*shape)).exp()
            }
            GenericSource::Tabulated { theta: knots, density } => {
                let i = knots.partition_point(|&k| k <= theta).clamp(1, knots.len() - 1);
                let (a, b) = (knots[i - 1], knots[i]);
                let s = (theta - a) / (b - a);
                density[i - 1] + s * (density[i] - density[i - 1])
            }
            GenericSource::Custom(f) => f(theta),
        }
    }

    pub fn cdf(&self, theta: f64) -> f64 {
        if theta <= self.lo {
            return 0.0;
        }
        if theta >= self.hi {
            return 1.0;
        }
        match (&self.source, &self.table) {
            (GenericSource::ScaledGamma { shape, rate }, _) => gamma_p(*shape, rate * theta),
            (_, Some(table)) => {
                let i = table.knots.partition_point(|&k| k <= theta).clamp(1, table.knots.len() - 1);
                let a = table.knots[i - 1];
                let partial = match &self.source {
                    GenericSource::Tabulated { .. } => 0.5 * (theta - a) * (self.density(a) + self.density(theta)),
                    _ => {
                        let (x, w) = quad::gauss_legendre(5);
                        let (mid, half) = (0.5 * (a + theta), 0.5 * (theta - a));
                        x.iter().zip(&w).map(|(xi, wi)| wi * self.density(mid + half * xi)).sum::<f64>() * half
                    }
                };
                (table.cum[i - 1] + partial).min(1.0)
            }
            _ => unreachable!("non-gamma sources always carry a table"),
        }
    }

    pub fn survival(&self, theta: f64) -> f64 {
        match &self.source {
            GenericSource::ScaledGamma { shape, rate } if theta > 0.0 => gamma_q(*shape, rate * theta),
            _ => 1.0 - self.cdf(theta),
        }
    }

    /// Inverse distribution function by bisection.
    pub fn quantile(&self, p: f64) -> f64 {
        let Some(table) = &self.table else {
            // Gamma: bisection in log θ, using the survival function for
            // upper quantiles to keep relative accuracy.
            let upper = p > 0.5;
            let below = |u: f64| {
                if upper {
                    self.survival(u.exp()) > 1.0 - p
                } else {
                    self.cdf(u.exp()) < p
                }
            };
            let (mut lo, mut hi) = (-745.0f64, 709.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if below(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return (0.5 * (lo + hi)).exp();
        };
        let target = p * table.cum.last().expect("table is non-empty");
        let i = table.cum.partition_point(|&c| c < target).clamp(1, table.knots.len() - 1);
        let (mut a, mut b) = (table.knots[i - 1], table.knots[i]);
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            if self.cdf(mid) < p {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.source {
            GenericSource::ScaledGamma { shape, rate } => {
                Gamma::new(*shape, 1.0 / rate).expect("validated parameters").sample(rng)
            }
            _ => self.quantile(rng.random::<f64>()),
        }
    }

    /// `E[Θ^{−ν}]`, or `None` when it diverges.
    pub fn neg_moment(&self, nu: f64) -> Option<f64> {
        if nu == 0.0 {
            return Some(1.0);
        }
        match &self.source {
            GenericSource::ScaledGamma { shape, rate } => {
                (nu < *shape).then(|| (nu * rate.ln() + ln_gamma(shape - nu) - ln_gamma(*shape)).exp())
            }
            _ => {
                let (val, err) = quad::integrate(|t| t.powf(-nu) * self.density(t), self.lo, self.hi, 1e-12, 1e-10);
                (val.is_finite() && err <= 1e-6 * val.abs()).then_some(val)
            }
        }
    }

    /// Mass reaches down to zero, so `1/Θ` is unbounded.
    pub fn heavy_tailed(&self) -> bool {
        self.lo == 0.0
    }

    pub(crate) fn cached_rule(&self, build: impl FnOnce() -> Result<QuadratureRule>) -> Result<&QuadratureRule> {
        if let Some(rule) = self.rule.get() {
            return Ok(rule);
        }
        let _ = self.rule.set(build()?);
        Ok(self.rule.get().expect("rule was just stored"))
    }
}

//! The scaled law X = Y/Θ with Y phase-type and Θ an independent positive
//! scaling variable.

use std::sync::{Arc, OnceLock};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::Matrix;
use crate::mixing::{MixingFamily, QuadratureRule, DEFAULT_NODES};
use crate::phasetype::PhParams;

/// Target accuracy of [`CphModel::quantile`] in probability.
const QUANTILE_TOL: f64 = 1e-10;

/// A moment that may diverge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Moment {
    Finite(f64),
    Infinite,
}

impl Moment {
    pub fn value(self) -> Option<f64> {
        match self {
            Moment::Finite(v) => Some(v),
            Moment::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Moment::Infinite)
    }
}

/// How Θ is integrated out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Family transform at a matrix argument (closed form where one exists).
    Transform,
    /// The model's cached quadrature rule.
    Quadrature,
}

#[derive(Debug, Clone)]
pub struct CphModel {
    ph: PhParams,
    mixing: MixingFamily,
    nodes: usize,
    rule: Arc<OnceLock<QuadratureRule>>,
}

impl CphModel {
    pub fn new(ph: PhParams, mixing: MixingFamily) -> Self {
        CphModel { ph, mixing, nodes: DEFAULT_NODES, rule: Arc::default() }
    }

    /// Model whose quadrature route uses `nodes` Gauss–Legendre nodes.
    pub fn with_nodes(ph: PhParams, mixing: MixingFamily, nodes: usize) -> Result<Self> {
        if nodes < 8 {
            return Err(Error::invalid(format!("quadrature needs at least 8 nodes, got {nodes}")));
        }
        Ok(CphModel { ph, mixing, nodes, rule: Arc::default() })
    }

    pub fn ph(&self) -> &PhParams {
        &self.ph
    }

    pub fn mixing(&self) -> &MixingFamily {
        &self.mixing
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Quadrature rule for Θ, built on first use and shared by clones.
    pub fn rule(&self) -> Result<&QuadratureRule> {
        if let Some(rule) = self.rule.get() {
            return Ok(rule);
        }
        let _ = self.rule.set(self.mixing.quadrature(self.nodes)?);
        Ok(self.rule.get().expect("rule was just stored"))
    }

    fn check_point(x: f64) -> Result<()> {
        if !(x > 0.0) {
            return Err(Error::domain(format!("evaluation point must be positive, got {x}")));
        }
        Ok(())
    }

    /// `E[exp(−ΘM)]` along the chosen route.
    fn transform(&self, m: &Matrix, route: Route) -> Result<Matrix> {
        match route {
            Route::Transform => self.mixing.laplace_mat(m),
            Route::Quadrature => self.mixing.laplace_mat_with(m, self.rule()?),
        }
    }

    fn transform_deriv(&self, m: &Matrix, route: Route) -> Result<Matrix> {
        match route {
            Route::Transform => self.mixing.laplace_deriv_mat(m),
            Route::Quadrature => self.mixing.laplace_deriv_mat_with(m, self.rule()?),
        }
    }

    /// `π L_Θ(−Tx) e`.
    pub fn survival_by(&self, x: f64, route: Route) -> Result<f64> {
        Self::check_point(x)?;
        if x == f64::INFINITY {
            return Ok(0.0);
        }
        let l = self.transform(&(self.ph.t() * -x), route)?;
        Ok((self.ph.pi() * l).sum().clamp(0.0, 1.0))
    }

    /// `−π L′_Θ(−Tx) t`.
    pub fn pdf_by(&self, x: f64, route: Route) -> Result<f64> {
        Self::check_point(x)?;
        if x == f64::INFINITY {
            return Ok(0.0);
        }
        let d = self.transform_deriv(&(self.ph.t() * -x), route)?;
        Ok((-(self.ph.pi() * d * self.ph.exit())[0]).max(0.0))
    }

    pub fn survival(&self, x: f64) -> Result<f64> {
        self.survival_by(x, Route::Transform)
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(1.0 - self.survival(x)?)
    }

    pub fn cdf_by(&self, x: f64, route: Route) -> Result<f64> {
        Ok(1.0 - self.survival_by(x, route)?)
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        self.pdf_by(x, Route::Transform)
    }

    /// `E[e^{−sX}] = E[π((s/Θ)I − T)^{−1} t]` by quadrature over Θ.
    pub fn laplace(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::domain(format!("transform argument must be positive and finite, got {s}")));
        }
        let rule = self.rule()?;
        let t = self.ph.t();
        let exit = self.ph.exit();
        let p = self.ph.dim();
        let mut acc = 0.0;
        for (&theta, &mass) in rule.nodes.iter().zip(&rule.masses) {
            let a = Matrix::from_diagonal_element(p, p, s / theta) - t;
            let v: DVector<f64> = a
                .lu()
                .solve(exit)
                .ok_or_else(|| Error::domain(format!("resolvent is singular at θ = {theta}")))?;
            acc += mass * (self.ph.pi() * v)[0];
        }
        Ok(acc)
    }

    /// `E[X^ν] = E[Θ^{−ν}] E[Y^ν]`; divergence is reported as a value.
    pub fn moment(&self, nu: f64) -> Result<Moment> {
        if !(nu >= 0.0 && nu.is_finite()) {
            return Err(Error::domain(format!("moment order must be nonnegative, got {nu}")));
        }
        Ok(match self.mixing.neg_moment(nu) {
            Some(m) => Moment::Finite(m * self.ph.moment(nu)?),
            None => Moment::Infinite,
        })
    }

    /// One draw of `Y/Θ`; Y is drawn first.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let y = self.ph.sample(rng);
        y / self.mixing.sample(rng)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Inverse distribution function: bracketing by halving and doubling
    /// from a moment-based guess, then bisection in log x.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::domain(format!("probability must lie in (0, 1), got {q}")));
        }
        // Signed distance from the target; upper quantiles work with the
        // survival function to keep relative accuracy.
        let upper = q > 0.5;
        let gap = |x: f64| -> Result<f64> {
            Ok(if upper { (1.0 - q) - self.survival(x)? } else { self.cdf(x)? - q })
        };
        let guess = match self.moment(1.0)? {
            Moment::Finite(m) if m > 0.0 => m,
            _ => self.ph.moment(1.0)? / self.mixing.quantile(0.5)?,
        };
        let (mut lo, mut hi) = (guess, guess);
        while gap(lo)? > 0.0 {
            lo *= 0.5;
            if lo < f64::MIN_POSITIVE {
                return Ok(lo);
            }
        }
        while gap(hi)? < 0.0 {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::domain(format!("quantile {q} lies beyond the floating-point range")));
            }
        }
        let (mut a, mut b) = (lo.ln(), hi.ln());
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let g = gap(mid.exp())?;
            if g.abs() < 0.01 * QUANTILE_TOL || b - a < 1e-15 {
                return Ok(mid.exp());
            }
            if g < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok((0.5 * (a + b)).exp())
    }
}

#[cfg(test)]
mod tests;

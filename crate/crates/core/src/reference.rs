//! Reference heavy-tailed families used as fitting targets.

use crate::error::{Error, Result};
use crate::matfun::expm;
use crate::phasetype::PhParams;

fn check_shape(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("shape must be positive, got {beta}")));
    }
    Ok(())
}

fn check_point(x: f64) -> Result<()> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("evaluation point must be positive, got {x}")));
    }
    Ok(())
}

/// Matrix-Weibull law: `Y^{1/β}` with `Y ∼ PH(π, S)`.
#[derive(Debug, Clone)]
pub struct MatrixWeibull {
    pub ph: PhParams,
    pub beta: f64,
}

impl MatrixWeibull {
    pub fn new(ph: PhParams, beta: f64) -> Result<Self> {
        check_shape(beta)?;
        Ok(MatrixWeibull { ph, beta })
    }

    /// `π exp(S x^β) s β x^{β−1}`.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        check_point(x)?;
        if x.is_infinite() {
            return Ok(0.0);
        }
        let y = x.powf(self.beta);
        Ok(self.ph.pdf(y)? * self.beta * y / x)
    }

    /// `π exp(S x^β) e`.
    pub fn survival(&self, x: f64) -> Result<f64> {
        check_point(x)?;
        if x.is_infinite() {
            return Ok(0.0);
        }
        self.ph.survival(x.powf(self.beta))
    }
}

/// Matrix-Pareto type I law: `β(e^Y − 1)` with `Y ∼ PH(π, T)`, so that
/// `F̄(x) = π (1 + x/β)^T e`.
#[derive(Debug, Clone)]
pub struct MatrixPareto1 {
    pub ph: PhParams,
    pub beta: f64,
}

impl MatrixPareto1 {
    pub fn new(ph: PhParams, beta: f64) -> Result<Self> {
        check_shape(beta)?;
        Ok(MatrixPareto1 { ph, beta })
    }

    /// `π (1 + x/β)^T t / (β + x)`.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        check_point(x)?;
        if x.is_infinite() {
            return Ok(0.0);
        }
        let l = (x / self.beta).ln_1p();
        let e = expm(&(self.ph.t() * l))?;
        Ok(((self.ph.pi() * e * self.ph.exit())[0] / (self.beta + x)).max(0.0))
    }

    pub fn survival(&self, x: f64) -> Result<f64> {
        check_point(x)?;
        if x.is_infinite() {
            return Ok(0.0);
        }
        self.ph.survival((x / self.beta).ln_1p())
    }
}

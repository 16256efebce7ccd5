//! Scaling laws Θ: densities, samplers, Laplace transforms at matrix
//! arguments, quadrature rules and the scaling-parameter M-step.

mod generic;
pub mod stable;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::matfun::{self, Matrix, SchurForm};
use crate::quad;
use crate::special::{self, ln_gamma};

pub use generic::{GenericDensity, GenericSource};

/// Default number of quadrature nodes.
pub const DEFAULT_NODES: usize = 100;
/// Tail probability left uncovered at each end of a quadrature rule.
const COVERAGE: f64 = 1e-8;
/// Largest node placed by a quadrature rule.
const NODE_CAP: f64 = 1e300;
/// Search interval for the stable index in the M-step. The upper end stays
/// clear of the degenerate point α = 1.
const STABLE_SEARCH: (f64, f64) = (0.01, 0.99);
const STABLE_SEARCH_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum MixingFamily {
    /// Gamma(α, 1).
    Gamma { alpha: f64 },
    /// Positive stable with `L(s) = exp(−η s^α)`, `0 < α ≤ 1`; α = 1 is the
    /// point mass at η.
    Stable { alpha: f64, eta: f64 },
    Generic(GenericDensity),
}

/// Nodes and masses `wⱼ f(θⱼ)` approximating integrals against the
/// scaling density.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    /// Weights with respect to dθ.
    pub weights: Vec<f64>,
    /// `weights[j] · f(nodes[j])`.
    pub masses: Vec<f64>,
    /// Set when the upper quantile had to be capped.
    pub coverage_warning: bool,
}

impl QuadratureRule {
    /// Single node carrying all mass.
    pub fn point_mass(theta: f64) -> Self {
        QuadratureRule { nodes: vec![theta], weights: vec![1.0], masses: vec![1.0], coverage_warning: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Posterior information about Θ aggregated by the E-step.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingStats {
    /// Posterior mass at each quadrature node.
    Nodes { nodes: Vec<f64>, weights: Vec<f64> },
    /// Total posterior mass and the sum of `E[log Θ | data]`.
    LogMoment { mass: f64, log_sum: f64 },
    None,
}

impl MixingFamily {
    pub fn gamma(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("gamma shape must be positive, got {alpha}")));
        }
        Ok(MixingFamily::Gamma { alpha })
    }

    pub fn stable(alpha: f64, eta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("stable index must lie in (0, 1], got {alpha}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("stable scale must be positive, got {eta}")));
        }
        Ok(MixingFamily::Stable { alpha, eta })
    }

    /// The estimated parameter, if the family has one.
    pub fn alpha(&self) -> Option<f64> {
        match self {
            MixingFamily::Gamma { alpha } | MixingFamily::Stable { alpha, .. } => Some(*alpha),
            MixingFamily::Generic(_) => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixingFamily::Gamma { .. } => "gamma",
            MixingFamily::Stable { .. } => "stable",
            MixingFamily::Generic(_) => "generic",
        }
    }

    /// Θ is a point mass.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, MixingFamily::Stable { alpha, .. } if *alpha == 1.0)
    }

    fn check_theta(theta: f64) -> Result<()> {
        if !(theta > 0.0) || theta.is_nan() {
            return Err(Error::domain(format!("scaling value must be positive, got {theta}")));
        }
        Ok(())
    }

    pub fn density(&self, theta: f64) -> Result<f64> {
        Ok(self.ln_density(theta)?.exp())
    }

    pub fn ln_density(&self, theta: f64) -> Result<f64> {
        Self::check_theta(theta)?;
        Ok(match self {
            MixingFamily::Gamma { alpha } => (alpha - 1.0) * theta.ln() - theta - ln_gamma(*alpha),
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    return Err(Error::domain("the degenerate stable law has no density"));
                }
                stable_ln_density(theta, *alpha, *eta)
            }
            MixingFamily::Generic(g) => g.density(theta).ln(),
        })
    }

    pub fn cdf(&self, theta: f64) -> Result<f64> {
        Self::check_theta(theta)?;
        Ok(match self {
            MixingFamily::Gamma { alpha } => special::gamma_p(*alpha, theta),
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    return Ok(if theta >= *eta { 1.0 } else { 0.0 });
                }
                stable::cdf(theta / eta.powf(1.0 / alpha), *alpha)
            }
            MixingFamily::Generic(g) => g.cdf(theta),
        })
    }

    pub fn survival(&self, theta: f64) -> Result<f64> {
        Self::check_theta(theta)?;
        Ok(match self {
            MixingFamily::Gamma { alpha } => special::gamma_q(*alpha, theta),
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    return Ok(if theta >= *eta { 0.0 } else { 1.0 });
                }
                stable::survival(theta / eta.powf(1.0 / alpha), *alpha)
            }
            MixingFamily::Generic(g) => g.survival(theta),
        })
    }

    /// Scalar Laplace transform `E[e^{−sΘ}]`.
    pub fn laplace(&self, s: f64) -> Result<f64> {
        let m = Matrix::from_element(1, 1, s);
        Ok(self.laplace_mat(&m)?[(0, 0)])
    }

    /// `E[exp(−ΘM)]` for `M` with spectrum in the open right half-plane.
    pub fn laplace_mat(&self, m: &Matrix) -> Result<Matrix> {
        match self {
            MixingFamily::Gamma { alpha } => {
                let schur = right_half_plane(m)?;
                Ok(real(schur.shifted(1.0).powc(Complex64::new(-alpha, 0.0))?))
            }
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    right_half_plane(m)?;
                    return matfun::expm(&(m * -eta));
                }
                let schur = right_half_plane(m)?;
                let p = schur.powc(Complex64::new(*alpha, 0.0))?;
                Ok(real(matfun::expm_complex(&(p * Complex64::new(-eta, 0.0)))?))
            }
            MixingFamily::Generic(g) => {
                right_half_plane(m)?;
                let rule = g.cached_rule(|| self.build_rule(DEFAULT_NODES))?;
                laplace_sum(m, rule, 0)
            }
        }
    }

    /// Matrix version of `L′_Θ`: `−E[Θ exp(−ΘM)]`.
    pub fn laplace_deriv_mat(&self, m: &Matrix) -> Result<Matrix> {
        match self {
            MixingFamily::Gamma { alpha } => {
                let schur = right_half_plane(m)?;
                let p = schur.shifted(1.0).powc(Complex64::new(-alpha - 1.0, 0.0))?;
                Ok(-real(p) * *alpha)
            }
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    right_half_plane(m)?;
                    return Ok(-matfun::expm(&(m * -eta))? * *eta);
                }
                let schur = right_half_plane(m)?;
                let pa = schur.powc(Complex64::new(*alpha, 0.0))?;
                let pa1 = schur.powc(Complex64::new(alpha - 1.0, 0.0))?;
                let e = matfun::expm_complex(&(pa * Complex64::new(-eta, 0.0)))?;
                Ok(-real(pa1 * e) * (alpha * eta))
            }
            MixingFamily::Generic(g) => {
                right_half_plane(m)?;
                let rule = g.cached_rule(|| self.build_rule(DEFAULT_NODES))?;
                Ok(-laplace_sum(m, rule, 1)?)
            }
        }
    }

    /// `E[exp(−ΘM)]` by quadrature against `rule`, for any family.
    pub fn laplace_mat_with(&self, m: &Matrix, rule: &QuadratureRule) -> Result<Matrix> {
        right_half_plane(m)?;
        laplace_sum(m, rule, 0)
    }

    /// `−E[Θ exp(−ΘM)]` by quadrature against `rule`.
    pub fn laplace_deriv_mat_with(&self, m: &Matrix, rule: &QuadratureRule) -> Result<Matrix> {
        right_half_plane(m)?;
        Ok(-laplace_sum(m, rule, 1)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            MixingFamily::Gamma { alpha } => Gamma::new(*alpha, 1.0).expect("validated shape").sample(rng),
            MixingFamily::Stable { alpha, eta } => {
                if *alpha == 1.0 {
                    *eta
                } else {
                    eta.powf(1.0 / alpha) * stable::sample(*alpha, rng)
                }
            }
            MixingFamily::Generic(g) => g.sample(rng),
        }
    }

    /// `E[Θ^{−ν}]`, `None` when infinite.
    pub fn neg_moment(&self, nu: f64) -> Option<f64> {
        if nu == 0.0 {
            return Some(1.0);
        }
        match self {
            MixingFamily::Gamma { alpha } => (nu < *alpha).then(|| (ln_gamma(alpha - nu) - ln_gamma(*alpha)).exp()),
            MixingFamily::Stable { alpha, eta } => Some(eta.powf(-nu / alpha) * stable::neg_moment(nu, *alpha)),
            MixingFamily::Generic(g) => g.neg_moment(nu),
        }
    }

    /// Quantile of Θ.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("probability must lie in (0, 1), got {p}")));
        }
        Ok(match self {
            MixingFamily::Generic(g) => g.quantile(p),
            MixingFamily::Stable { alpha, eta } if *alpha == 1.0 => *eta,
            _ => {
                // Bisection in log θ; upper quantiles go through the
                // survival function.
                let upper = p > 0.5;
                let below = |u: f64| -> bool {
                    let theta = u.exp();
                    if upper {
                        self.survival(theta).unwrap_or(0.0) > 1.0 - p
                    } else {
                        self.cdf(theta).unwrap_or(1.0) < p
                    }
                };
                let (mut lo, mut hi) = (-745.0f64, 709.0f64);
                for _ in 0..120 {
                    let mid = 0.5 * (lo + hi);
                    if below(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (0.5 * (lo + hi)).exp()
            }
        })
    }

    /// Gauss–Legendre rule in log θ over the quantile range
    /// `[q(1e−8), q(1 − 1e−8)]`.
    pub fn quadrature(&self, n: usize) -> Result<QuadratureRule> {
        if n < 8 {
            return Err(Error::invalid(format!("quadrature needs at least 8 nodes, got {n}")));
        }
        if let MixingFamily::Generic(g) = self {
            if n == DEFAULT_NODES {
                return Ok(g.cached_rule(|| self.build_rule(n))?.clone());
            }
        }
        self.build_rule(n)
    }

    fn build_rule(&self, n: usize) -> Result<QuadratureRule> {
        if let MixingFamily::Stable { alpha, eta } = self {
            if *alpha == 1.0 {
                return Ok(QuadratureRule::point_mass(*eta));
            }
        }
        let lo = self.quantile(COVERAGE)?;
        let mut hi = self.quantile(1.0 - COVERAGE)?;
        let mut coverage_warning = false;
        if !(hi <= NODE_CAP) {
            hi = NODE_CAP;
            coverage_warning = true;
        }
        if !(hi > lo) {
            return Err(Error::domain(format!("degenerate quantile range [{lo}, {hi}]")));
        }
        let (x, w) = quad::gauss_legendre_on(n, lo.ln(), hi.ln());
        let mut rule = QuadratureRule {
            nodes: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            masses: Vec::with_capacity(n),
            coverage_warning,
        };
        for (u, wu) in x.into_iter().zip(w) {
            let theta = u.exp();
            let ln_f = self.ln_density(theta)?;
            rule.nodes.push(theta);
            rule.weights.push(wu * theta);
            rule.masses.push((wu.ln() + u + ln_f).exp());
        }
        Ok(rule)
    }

    /// Maximizes the expected complete-data log density of Θ.
    ///
    /// The returned family never lowers the objective relative to `self`.
    pub fn mstep(&self, stats: &MixingStats) -> Result<MixingFamily> {
        match (self, stats) {
            (MixingFamily::Generic(_), _) | (_, MixingStats::None) => Ok(self.clone()),
            (MixingFamily::Gamma { .. }, _) => {
                let (mass, log_sum) = match stats {
                    MixingStats::LogMoment { mass, log_sum } => (*mass, *log_sum),
                    MixingStats::Nodes { nodes, weights } => {
                        check_weights(weights)?;
                        let mass: f64 = weights.iter().sum();
                        let s = nodes.iter().zip(weights).map(|(t, w)| w * t.ln()).sum();
                        (mass, s)
                    }
                    MixingStats::None => unreachable!(),
                };
                if !(mass > 0.0) || !log_sum.is_finite() {
                    return Err(Error::invalid("mixing statistics carry no mass"));
                }
                // Stationarity of Σ[(α−1)E log Θ − E Θ − log Γ(α)]: ψ(α) = mean log θ.
                let alpha = special::inverse_digamma(log_sum / mass)
                    .ok_or_else(|| Error::Estimation("gamma shape update did not converge".into()))?;
                MixingFamily::gamma(alpha)
            }
            (MixingFamily::Stable { alpha, eta }, MixingStats::Nodes { nodes, weights }) => {
                check_weights(weights)?;
                if *alpha == 1.0 {
                    return Ok(self.clone());
                }
                let objective = |a: f64| -> f64 {
                    nodes
                        .iter()
                        .zip(weights)
                        .filter(|(_, w)| **w > 0.0)
                        .map(|(t, w)| w * stable_ln_density(*t, a, *eta))
                        .sum()
                };
                let best = golden_section_max(&objective, STABLE_SEARCH.0, STABLE_SEARCH.1, STABLE_SEARCH_TOL);
                let current = objective(*alpha);
                let next = if objective(best) > current { best } else { *alpha };
                MixingFamily::stable(next, *eta)
            }
            (MixingFamily::Stable { .. }, MixingStats::LogMoment { .. }) => Err(Error::invalid(
                "stable update needs per-node posterior masses",
            )),
        }
    }

    /// Expected complete-data objective `Σ wⱼ log f(θⱼ)` for node weights.
    pub fn node_objective(&self, nodes: &[f64], weights: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (t, w) in nodes.iter().zip(weights) {
            if *w > 0.0 {
                acc += w * self.ln_density(*t)?;
            }
        }
        Ok(acc)
    }

    /// Expected complete-data objective from the log-moment summary
    /// (Gamma only): `(α−1) Σ E log Θ − mass·log Γ(α)`, up to terms free of α.
    pub fn log_moment_objective(&self, mass: f64, log_sum: f64) -> Option<f64> {
        match self {
            MixingFamily::Gamma { alpha } => Some((alpha - 1.0) * log_sum - mass * ln_gamma(*alpha)),
            _ => None,
        }
    }
}

fn stable_ln_density(theta: f64, alpha: f64, eta: f64) -> f64 {
    // Θ = η^{1/α} Θ₁.
    let ln_scale = eta.ln() / alpha;
    stable::ln_density((theta.ln() - ln_scale).exp(), alpha) - ln_scale
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("mixing weights must be finite and nonnegative"));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::invalid("mixing weights are all zero"));
    }
    Ok(())
}

fn golden_section_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    // Include the end points: the objective may be monotone on the interval.
    let mid = 0.5 * (a + b);
    [mid, STABLE_SEARCH.0, STABLE_SEARCH.1]
        .into_iter()
        .map(|x| (x, f(x)))
        .fold((mid, f64::NEG_INFINITY), |best, (x, v)| if v > best.1 { (x, v) } else { best })
        .0
}

fn right_half_plane(m: &Matrix) -> Result<SchurForm> {
    let schur = SchurForm::from_real(m)?;
    if let Some(z) = schur.eigenvalues().into_iter().find(|z| !(z.re > 0.0)) {
        return Err(Error::domain(format!("eigenvalue {z} is not in the open right half-plane")));
    }
    Ok(schur)
}

fn real(m: matfun::CMatrix) -> Matrix {
    m.map(|v| v.re)
}

/// `Σ mass_j θ_j^power exp(−θ_j M)`.
fn laplace_sum(m: &Matrix, rule: &QuadratureRule, power: i32) -> Result<Matrix> {
    let mut acc = Matrix::zeros(m.nrows(), m.ncols());
    for (theta, mass) in rule.nodes.iter().zip(&rule.masses) {
        if *mass == 0.0 {
            continue;
        }
        acc += matfun::expm(&(m * -theta))? * (mass * theta.powi(power));
    }
    Ok(acc)
}

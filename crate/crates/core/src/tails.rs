//! Tail diagnostics: regular-variation checks for the PH factor, Breiman
//! constants and first-order tail asymptotics of scaled models.

use nalgebra::RowDVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cph::CphModel;
use crate::error::{Error, Result};
use crate::matfun::{self, Matrix, SchurForm};
use crate::mixing::MixingFamily;
use crate::phasetype::{PhParams, SubIntensity};

/// Default scan: η = 0 plus 399 log-spaced points on [0.01, 20].
pub const DEFAULT_ETA_POINTS: usize = 400;
pub const DEFAULT_ETA_MAX: f64 = 20.0;
const ETA_MIN: f64 = 0.01;
/// Relative zero threshold, scaled by ‖π‖₁·‖(−T)^{−α}‖₁.
const ZERO_TOL: f64 = 1e-10;

/// Scan of `|π (−T⁻¹)^{α+iη} e|` over η.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvdReport {
    pub alpha: f64,
    pub eta_grid: Vec<f64>,
    pub modulus: Vec<f64>,
    /// Smallest modulus found, after local refinement around the best
    /// grid point.
    pub min_modulus: f64,
    pub min_eta: f64,
    /// Moduli below this count as zeros.
    pub threshold: f64,
}

impl RvdReport {
    /// A near-zero was found, so the PH factor may fail to be α-rvd.
    pub fn flagged(&self) -> bool {
        self.min_modulus < self.threshold
    }
}

/// `[0, 0.01, …, eta_max]` with log spacing above 0.01.
pub fn eta_grid(eta_max: f64, points: usize) -> Result<Vec<f64>> {
    if !(eta_max > ETA_MIN && eta_max.is_finite()) {
        return Err(Error::invalid(format!("η range must extend beyond {ETA_MIN}, got {eta_max}")));
    }
    if points < 3 {
        return Err(Error::invalid(format!("η grid needs at least 3 points, got {points}")));
    }
    let (a, b) = (ETA_MIN.ln(), eta_max.ln());
    let m = points - 1;
    let mut grid = vec![0.0];
    grid.extend((0..m).map(|i| (a + (b - a) * i as f64 / (m - 1) as f64).exp()));
    Ok(grid)
}

pub fn default_eta_grid() -> Vec<f64> {
    eta_grid(DEFAULT_ETA_MAX, DEFAULT_ETA_POINTS).expect("default grid is valid")
}

fn rvd_value(pi: &RowDVector<f64>, green: &SchurForm, alpha: f64, eta: f64) -> Result<f64> {
    let u = green.powc(Complex64::new(alpha, eta))?;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, &w) in pi.iter().enumerate() {
        if w != 0.0 {
            acc += u.row(i).sum() * w;
        }
    }
    Ok(acc.norm())
}

/// Golden-section minimization of `f` on `[a, b]`.
fn golden_min(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..200 {
        if b - a <= 4.0 * f64::EPSILON * b.abs().max(a.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Evaluates `|π (−T⁻¹)^{α+iη} e|` on `eta_grid` and refines the smallest
/// value between its grid neighbours.
pub fn rvd_check(ph: &PhParams, alpha: f64, eta_grid: &[f64]) -> Result<RvdReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("index must be positive, got {alpha}")));
    }
    if eta_grid.is_empty() || eta_grid.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("η grid must be nonempty and finite"));
    }
    let green = SchurForm::from_real(&ph.sub().green())?;
    let pi = ph.pi();
    let f = |eta: f64| rvd_value(pi, &green, alpha, eta);
    let modulus = eta_grid.iter().map(|&e| f(e)).collect::<Result<Vec<_>>>()?;
    let (best, _) = modulus
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &m)| if m < acc.1 { (i, m) } else { acc });
    let (mut min_eta, mut min_modulus) = (eta_grid[best], modulus[best]);
    let lower = eta_grid.iter().copied().filter(|&e| e < min_eta).fold(f64::NEG_INFINITY, f64::max);
    let upper = eta_grid.iter().copied().filter(|&e| e > min_eta).fold(f64::INFINITY, f64::min);
    if lower.is_finite() && upper.is_finite() {
        let (e, m) = golden_min(&f, lower, upper)?;
        if m < min_modulus {
            min_eta = e;
            min_modulus = m;
        }
    }
    let scale = pi.iter().map(|v| v.abs()).sum::<f64>() * matfun::one_norm(&green.powc(Complex64::new(alpha, 0.0))?);
    Ok(RvdReport {
        alpha,
        eta_grid: eta_grid.to_vec(),
        modulus,
        min_modulus,
        min_eta,
        threshold: ZERO_TOL * scale,
    })
}

/// Two-state hyperexponential for which `π (−T⁻¹)^{α+iη} e = 0`:
/// `T = diag(−1, −e^{−π/η})` and `π₁ = e^{απ/η}/(1 + e^{απ/η})`.
pub fn counterexample_ph(alpha: f64, eta: f64) -> Result<PhParams> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("index must be positive, got {alpha}")));
    }
    if eta == 0.0 || !eta.is_finite() {
        return Err(Error::invalid(format!("η must be finite and nonzero, got {eta}")));
    }
    let s = std::f64::consts::PI / eta;
    let rate = (-s).exp();
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::domain(format!("second rate e^(−π/η) is not representable for η = {eta}")));
    }
    // π₁ = 1/(1 + e^{−απ/η}) and π₂ = 1/(1 + e^{απ/η}), each without overflow.
    let a = alpha * s;
    let p2 = 1.0 / (1.0 + a.exp());
    let p1 = 1.0 / (1.0 + (-a).exp());
    let t = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -rate]);
    PhParams::new(RowDVector::from_vec(vec![p1, p2]), SubIntensity::new(t)?)
}

/// `E[Y^α]`, the factor in `F̄_{Y/Θ}(x) ∼ E[Y^α] P(1/Θ > x)`.
pub fn breiman_constant(ph: &PhParams, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("index must be nonnegative, got {alpha}")));
    }
    ph.moment(alpha)
}

/// First-order tail behaviour of a scaled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailSummary {
    /// `F̄(x) ∼ C x^{−index}`.
    RegularlyVarying {
        index: f64,
        /// `x^index F̄(x)` at `x = 1e6`.
        constant: f64,
        /// The same quantity at `x = 1e5`.
        constant_coarse: f64,
        /// `|constant − constant_coarse| / constant`.
        relative_gap: f64,
    },
    /// `F̄(x) ∼ c x^power exp(−rate x^shape)`.
    WeibullType { shape: f64, rate: f64, power: f64, constant: f64, heavy: bool },
    /// Only heaviness is known: the tail is heavy exactly when the scaling
    /// law has mass down to zero.
    Unclassified { heavy: bool },
}

pub fn tail_summary(model: &CphModel) -> Result<TailSummary> {
    match model.mixing() {
        MixingFamily::Gamma { alpha } => {
            let c = |x: f64| -> Result<f64> { Ok(model.survival(x)? * x.powf(*alpha)) };
            let (fine, coarse) = (c(1e6)?, c(1e5)?);
            Ok(TailSummary::RegularlyVarying {
                index: *alpha,
                constant: fine,
                constant_coarse: coarse,
                relative_gap: (fine - coarse).abs() / fine,
            })
        }
        MixingFamily::Stable { alpha, eta } => {
            // F̄(x) = π exp(−η (−T)^α x^α) e; the leading Jordan block of −T
            // at r carries over through z ↦ η z^α, so the PH constant is
            // multiplied by (η α r^{α−1})^k.
            let dom = model.ph().tail_dominant()?;
            let k = dom.power as f64;
            let r = dom.rate;
            Ok(TailSummary::WeibullType {
                shape: *alpha,
                rate: eta * r.powf(*alpha),
                power: alpha * k,
                constant: dom.constant * (eta * alpha * r.powf(alpha - 1.0)).powf(k),
                heavy: *alpha < 1.0,
            })
        }
        MixingFamily::Generic(g) => Ok(TailSummary::Unclassified { heavy: g.heavy_tailed() }),
    }
}

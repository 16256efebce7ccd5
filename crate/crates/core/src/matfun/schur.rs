//! Primary matrix functions (complex powers, logarithm) through the complex
//! Schur form, and spectral decompositions for the batched E-step kernels.

use nalgebra::{linalg::Schur, DMatrix};
use num_complex::Complex64;

use super::expm::{expm_generic, one_norm};
use super::scalar::{dd_log, dd_pow};
use super::CMatrix;
use crate::error::{Error, Result};

/// Minimum relative separation of distinct eigenvalues for the plain
/// Parlett recurrence. Closer eigenvalues go through inverse scaling and
/// squaring on the triangular factor instead.
const PARLETT_SEPARATION: f64 = 0.1;

/// Largest eigenvector condition number accepted by [`Eigen::of_real`].
pub const EIGEN_CONDITION_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy)]
enum ScalarFn {
    Pow(Complex64),
    Log,
}

impl ScalarFn {
    fn eval(self, z: Complex64) -> Complex64 {
        match self {
            ScalarFn::Pow(a) => {
                if a == Complex64::new(0.0, 0.0) {
                    Complex64::new(1.0, 0.0)
                } else {
                    (a * z.ln()).exp()
                }
            }
            ScalarFn::Log => z.ln(),
        }
    }

    fn divided(self, z1: Complex64, z2: Complex64) -> Complex64 {
        match self {
            ScalarFn::Pow(a) => dd_pow(z1, z2, a),
            ScalarFn::Log => dd_log(z1, z2),
        }
    }
}

/// Complex Schur factorization `M = Q R Q*` with `R` upper triangular.
#[derive(Debug, Clone)]
pub struct SchurForm {
    q: CMatrix,
    r: CMatrix,
}

impl SchurForm {
    pub fn new(m: &CMatrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::invalid("Schur form needs a non-empty square matrix"));
        }
        if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let n = m.nrows();
        if is_upper_triangular(m) {
            return Ok(SchurForm { q: CMatrix::identity(n, n), r: m.clone() });
        }
        let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::domain("complex Schur iteration did not converge"))?;
        let (q, mut r) = schur.unpack();
        for j in 0..n {
            for i in j + 1..n {
                r[(i, j)] = Complex64::new(0.0, 0.0);
            }
        }
        Ok(SchurForm { q, r })
    }

    pub fn from_real(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(&to_complex(m))
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        (0..self.dim()).map(|i| self.r[(i, i)]).collect()
    }

    pub fn triangular(&self) -> &CMatrix {
        &self.r
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.q
    }

    /// Schur form of `M + cI`, sharing the unitary factor.
    pub fn shifted(&self, c: f64) -> SchurForm {
        let n = self.dim();
        let mut r = self.r.clone();
        for i in 0..n {
            r[(i, i)] += c;
        }
        SchurForm { q: self.q.clone(), r }
    }

    /// Rebuilds `Q F Qᴴ` from a function `F` of the triangular factor.
    fn unfold(&self, f: CMatrix) -> CMatrix {
        &self.q * f * self.q.adjoint()
    }

    fn check_branch_cut(&self) -> Result<()> {
        let scale = one_norm(&self.r).max(f64::MIN_POSITIVE);
        for lambda in self.eigenvalues() {
            if lambda.norm() <= 1e-14 * scale {
                return Err(Error::domain("matrix is singular; principal power undefined"));
            }
            if lambda.re <= 0.0 && lambda.im.abs() <= 1e-14 * scale {
                return Err(Error::domain(format!(
                    "eigenvalue {lambda} lies on the branch cut (closed negative real axis)"
                )));
            }
        }
        Ok(())
    }

    /// Principal power `M^a` for complex `a`.
    pub fn powc(&self, a: Complex64) -> Result<CMatrix> {
        if a == Complex64::new(0.0, 0.0) {
            return Ok(CMatrix::identity(self.dim(), self.dim()));
        }
        self.check_branch_cut()?;
        let f = if a.im == 0.0 && a.re.fract() == 0.0 && a.re.abs() <= 64.0 {
            integer_power(&self.r, a.re as i32)?
        } else {
            triangular_function(&self.r, ScalarFn::Pow(a))?
        };
        Ok(self.unfold(f))
    }

    /// Principal logarithm.
    pub fn log(&self) -> Result<CMatrix> {
        self.check_branch_cut()?;
        let f = triangular_function(&self.r, ScalarFn::Log)?;
        Ok(self.unfold(f))
    }
}

pub(crate) fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

fn is_upper_triangular(m: &CMatrix) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (j + 1..n).all(|i| m[(i, j)] == Complex64::new(0.0, 0.0)))
}

fn integer_power(r: &CMatrix, k: i32) -> Result<CMatrix> {
    let n = r.nrows();
    let base = if k < 0 {
        r.clone()
            .try_inverse()
            .ok_or_else(|| Error::domain("matrix is singular"))?
    } else {
        r.clone()
    };
    let mut e = k.unsigned_abs();
    let mut acc = CMatrix::identity(n, n);
    let mut sq = base;
    while e > 0 {
        if e & 1 == 1 {
            acc = &acc * &sq;
        }
        e >>= 1;
        if e > 0 {
            sq = &sq * &sq;
        }
    }
    Ok(acc)
}

fn well_separated(r: &CMatrix) -> bool {
    let n = r.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (r[(i, i)], r[(j, j)]);
            if (a - b).norm() < PARLETT_SEPARATION * a.norm().max(b.norm()) {
                return false;
            }
        }
    }
    true
}

fn triangular_function(r: &CMatrix, f: ScalarFn) -> Result<CMatrix> {
    if well_separated(r) {
        Ok(parlett(r, f))
    } else {
        let log = triangular_log_iss(r)?;
        match f {
            ScalarFn::Log => Ok(log),
            ScalarFn::Pow(a) => expm_generic(&log.map(|v| v * a)),
        }
    }
}

/// Parlett recurrence for `f(R)`, `R` upper triangular with distinct
/// diagonal. The first-order term uses an accurate divided difference.
fn parlett(r: &CMatrix, f: ScalarFn) -> CMatrix {
    let n = r.nrows();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = f.eval(r[(i, i)]);
    }
    for j in 1..n {
        for i in (0..j).rev() {
            let mut acc = r[(i, j)] * f.divided(r[(j, j)], r[(i, i)]);
            let mut sum = Complex64::new(0.0, 0.0);
            for k in i + 1..j {
                sum += r[(i, k)] * out[(k, j)] - out[(i, k)] * r[(k, j)];
            }
            acc += sum / (r[(j, j)] - r[(i, i)]);
            out[(i, j)] = acc;
        }
    }
    out
}

/// Principal square root of an upper triangular matrix (Björck–Hammarling).
fn triangular_sqrt(r: &CMatrix) -> CMatrix {
    let n = r.nrows();
    let mut s = CMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = r[(i, i)].sqrt();
    }
    for j in 1..n {
        for i in (0..j).rev() {
            let mut acc = r[(i, j)];
            for k in i + 1..j {
                acc -= s[(i, k)] * s[(k, j)];
            }
            s[(i, j)] = acc / (s[(i, i)] + s[(j, j)]);
        }
    }
    s
}

/// Logarithm of a triangular matrix by inverse scaling and squaring:
/// repeated square roots bring `R` near the identity, then the Mercator
/// series is summed and scaled back.
fn triangular_log_iss(r: &CMatrix) -> Result<CMatrix> {
    let n = r.nrows();
    let ident = CMatrix::identity(n, n);
    let mut x = r.clone();
    let mut roots = 0;
    while one_norm(&(&x - &ident)) > 0.2 {
        x = triangular_sqrt(&x);
        roots += 1;
        if roots > 100 {
            return Err(Error::domain("matrix logarithm: square roots did not approach identity"));
        }
    }
    let y = x - &ident;
    let mut term = y.clone();
    let mut sum = y.clone();
    for k in 2..200 {
        term = &term * &y;
        let add = term.map(|v| v / k as f64);
        let add_norm = one_norm(&add);
        if k % 2 == 0 {
            sum -= add;
        } else {
            sum += add;
        }
        if add_norm <= 1e-18 * one_norm(&sum).max(1e-300) {
            break;
        }
    }
    Ok(sum.map(|v| v * 2f64.powi(roots)))
}

/// Eigendecomposition `M = V diag(λ) V⁻¹` of a real diagonalizable matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<Complex64>,
    pub vectors: CMatrix,
    pub inverse: CMatrix,
    /// `‖V‖_F ‖V⁻¹‖_F` with unit-norm columns of `V`.
    pub condition: f64,
}

impl Eigen {
    /// Returns `None` when eigenvalues coincide (numerically) or when the
    /// eigenvector condition number exceeds `max_condition`.
    pub fn of_real(m: &DMatrix<f64>, max_condition: f64) -> Result<Option<Self>> {
        let schur = SchurForm::from_real(m)?;
        let r = &schur.r;
        let n = r.nrows();
        let scale = one_norm(r).max(f64::MIN_POSITIVE);
        // Eigenvectors of R by back substitution: column j solves (R - r_jj) w = 0.
        let mut w = CMatrix::zeros(n, n);
        for j in 0..n {
            let lambda = r[(j, j)];
            w[(j, j)] = Complex64::new(1.0, 0.0);
            for i in (0..j).rev() {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in i + 1..=j {
                    acc += r[(i, k)] * w[(k, j)];
                }
                let gap = r[(i, i)] - lambda;
                if gap.norm() <= 1e-12 * scale {
                    return Ok(None);
                }
                w[(i, j)] = -acc / gap;
            }
        }
        let mut v = &schur.q * w;
        for j in 0..n {
            let norm = v.column(j).norm();
            v.column_mut(j).unscale_mut(norm);
        }
        let Some(inverse) = v.clone().try_inverse() else {
            return Ok(None);
        };
        let condition = v.norm() * inverse.norm();
        if !condition.is_finite() || condition > max_condition {
            return Ok(None);
        }
        Ok(Some(Eigen { values: schur.eigenvalues(), vectors: v, inverse, condition }))
    }
}


//! Matrix-function engine: exponential, principal complex powers and
//! logarithm, and the convolution integrals of matrix exponentials used by
//! the EM kernels.
//!
//! All functions are pure; matrices are dense `nalgebra` matrices.

mod expm;
pub mod scalar;
mod schur;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub use expm::one_norm;
pub use schur::{Eigen, SchurForm, EIGEN_CONDITION_MAX};

pub type Matrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;


/// `exp(M)` for a real square matrix.
pub fn expm(m: &Matrix) -> Result<Matrix> {
    expm::expm_generic(m)
}

/// `exp(M)` for a complex square matrix.
pub fn expm_complex(m: &CMatrix) -> Result<CMatrix> {
    expm::expm_generic(m)
}

/// Principal power `M^a`, `a` complex. `M` must have no eigenvalue on the
/// closed negative real axis.
pub fn matpow(m: &Matrix, a: Complex64) -> Result<CMatrix> {
    if a == Complex64::new(0.0, 0.0) {
        check_square(m)?;
        return Ok(CMatrix::identity(m.nrows(), m.nrows()));
    }
    SchurForm::from_real(m)?.powc(a)
}

/// Principal real power of a real matrix; the imaginary part of the result
/// vanishes up to rounding and is dropped.
pub fn matpow_real(m: &Matrix, a: f64) -> Result<Matrix> {
    Ok(matpow(m, Complex64::new(a, 0.0))?.map(|v| v.re))
}

/// Principal logarithm of a real matrix (real part).
pub fn logm(m: &Matrix) -> Result<Matrix> {
    Ok(SchurForm::from_real(m)?.log()?.map(|v| v.re))
}

fn check_square(m: &Matrix) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(())
}

/// Block upper triangular `[[A, B], [0, A]]`.
pub(crate) fn van_loan_block(a: &Matrix, b: &Matrix) -> Matrix {
    let p = a.nrows();
    let mut c = Matrix::zeros(2 * p, 2 * p);
    c.view_mut((0, 0), (p, p)).copy_from(a);
    c.view_mut((p, p), (p, p)).copy_from(a);
    c.view_mut((0, p), (p, p)).copy_from(b);
    c
}

/// `exp(A x)` and `∫₀ˣ exp(A(x−u)) B exp(Au) du`, read off the exponential
/// of the Van Loan block `[[A, B], [0, A]]·x`.
pub fn vanloan_pair(a: &Matrix, b: &Matrix, x: f64) -> Result<(Matrix, Matrix)> {
    check_square(a)?;
    check_square(b)?;
    if a.nrows() != b.nrows() {
        return Err(Error::invalid(format!(
            "dimension mismatch: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("convolution horizon must be positive, got {x}")));
    }
    let p = a.nrows();
    let e = expm(&(van_loan_block(a, b) * x))?;
    Ok((
        e.view((0, 0), (p, p)).into_owned(),
        e.view((0, p), (p, p)).into_owned(),
    ))
}

/// `∫₀ˣ exp(A(x−u)) B exp(Au) du`.
pub fn vanloan_conv(a: &Matrix, b: &Matrix, x: f64) -> Result<Matrix> {
    Ok(vanloan_pair(a, b, x)?.1)
}

/// `∫_v^w exp(θ T u) du = (θT)⁻¹ (exp(θTw) − exp(θTv))`.
///
/// `w = ∞` is accepted and drops the `exp(θTw)` term (valid for
/// sub-intensity `T`).
pub fn exp_integral(t: &Matrix, theta: f64, v: f64, w: f64) -> Result<Matrix> {
    check_square(t)?;
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::invalid(format!("scale must be positive, got {theta}")));
    }
    if !(v >= 0.0) || w.is_nan() || w < v {
        return Err(Error::invalid(format!("need 0 <= v <= w, got v={v}, w={w}")));
    }
    let p = t.nrows();
    if v == w {
        return Ok(Matrix::zeros(p, p));
    }
    let a = t * theta;
    let ev = expm(&(&a * v))?;
    let ew = if w.is_infinite() { Matrix::zeros(p, p) } else { expm(&(&a * w))? };
    a.lu()
        .solve(&(ew - ev))
        .ok_or_else(|| Error::domain("matrix is singular"))
}

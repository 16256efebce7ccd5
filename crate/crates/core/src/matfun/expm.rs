//! Matrix exponential by scaling and squaring with diagonal Padé
//! approximants (Higham 2005 thresholds).

use nalgebra::{ComplexField, DMatrix};

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_230e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const B9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

pub fn one_norm<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.clone().modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn scaled<T: ComplexField<RealField = f64>>(m: &DMatrix<T>, s: f64) -> DMatrix<T> {
    m.map(|v| v * T::from_real(s))
}

/// Exponential of a square real or complex matrix.
pub fn expm_generic<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::invalid(format!(
            "expm needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.clone().modulus().is_finite()) {
        return Err(Error::invalid("expm input has non-finite entries"));
    }
    let n = a.nrows();
    let norm = one_norm(a);
    let ident = DMatrix::<T>::identity(n, n);

    for &(order, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match order {
                3 => &B3,
                5 => &B5,
                7 => &B7,
                _ => &B9,
            };
            let (u, v) = pade_low(a, coeffs, &ident);
            return solve_pade(u, v);
        }
    }

    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a_s = scaled(a, 2f64.powi(-squarings));
    let (u, v) = pade13(&a_s, &ident);
    let mut r = solve_pade(u, v)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low<T: ComplexField<RealField = f64>>(
    a: &DMatrix<T>,
    b: &[f64],
    ident: &DMatrix<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let a2 = a * a;
    let mut powers = vec![ident.clone(), a2.clone()];
    while powers.len() < b.len() / 2 {
        let next = powers.last().unwrap() * &a2;
        powers.push(next);
    }
    let mut u_inner = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    let mut v = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    for (k, p) in powers.iter().enumerate() {
        u_inner += scaled(p, b[2 * k + 1]);
        v += scaled(p, b[2 * k]);
    }
    (a * u_inner, v)
}

fn pade13<T: ComplexField<RealField = f64>>(a: &DMatrix<T>, ident: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let b = &B13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_hi = scaled(&a6, b[13]) + scaled(&a4, b[11]) + scaled(&a2, b[9]);
    let u_inner = &a6 * u_hi + scaled(&a6, b[7]) + scaled(&a4, b[5]) + scaled(&a2, b[3]) + scaled(ident, b[1]);
    let v_hi = scaled(&a6, b[12]) + scaled(&a4, b[10]) + scaled(&a2, b[8]);
    let v = &a6 * v_hi + scaled(&a6, b[6]) + scaled(&a4, b[4]) + scaled(&a2, b[2]) + scaled(ident, b[0]);
    (a * u_inner, v)
}

fn solve_pade<T: ComplexField<RealField = f64>>(u: DMatrix<T>, v: DMatrix<T>) -> Result<DMatrix<T>> {
    let denom = &v - &u;
    let numer = v + u;
    denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::domain("Padé denominator is singular"))
}

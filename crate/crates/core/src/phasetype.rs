//! Phase-type laws PH(π, T): validation, evaluation, moments, sampling,
//! structure templates and the dominant tail term.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, RowDVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::{self, Matrix, SchurForm};
use crate::special;

/// Relative tolerance under which a row sum counts as zero.
const ROW_SUM_TOL: f64 = 1e-10;
/// Tolerance on Σπ = 1.
const PI_SUM_TOL: f64 = 1e-9;

/// A validated sub-intensity matrix `T` with exit vector `t = −T e`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubIntensity {
    t: Matrix,
    exit: DVector<f64>,
}

impl SubIntensity {
    /// Validates `t`. Every rejection names the offending entry or row.
    pub fn new(t: Matrix) -> Result<Self> {
        let p = t.nrows();
        if p == 0 || t.ncols() != p {
            return Err(Error::InvalidSubIntensity(format!(
                "expected a non-empty square matrix, got {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        for i in 0..p {
            for j in 0..p {
                let v = t[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidSubIntensity(format!("entry ({i},{j}) is not finite")));
                }
                if i == j && v >= 0.0 {
                    return Err(Error::InvalidSubIntensity(format!(
                        "diagonal entry ({i},{i}) = {v} must be strictly negative"
                    )));
                }
                if i != j && v < 0.0 {
                    return Err(Error::InvalidSubIntensity(format!(
                        "off-diagonal entry ({i},{j}) = {v} must be nonnegative"
                    )));
                }
            }
        }
        let mut exit = DVector::zeros(p);
        for i in 0..p {
            let row = t.row(i);
            let sum: f64 = row.iter().sum();
            let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if sum > ROW_SUM_TOL * scale {
                return Err(Error::InvalidSubIntensity(format!(
                    "row {i} sums to {sum:e} > 0 (exit rate would be negative)"
                )));
            }
            exit[i] = (-sum).max(0.0);
            if exit[i] <= ROW_SUM_TOL * scale {
                exit[i] = 0.0;
            }
        }
        // T is nonsingular (and its spectrum lies in the open left
        // half-plane) exactly when every state can reach one with a
        // positive exit rate.
        let mut absorbing = exit.iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        loop {
            let mut changed = false;
            for i in 0..p {
                if !absorbing[i] && (0..p).any(|j| j != i && t[(i, j)] > 0.0 && absorbing[j]) {
                    absorbing[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(k) = absorbing.iter().position(|a| !a) {
            return Err(Error::InvalidSubIntensity(format!(
                "state {k} cannot reach absorption; the matrix is singular"
            )));
        }
        Ok(SubIntensity { t, exit })
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn exit(&self) -> &DVector<f64> {
        &self.exit
    }

    /// Green matrix `U = (−T)⁻¹`.
    pub fn green(&self) -> Matrix {
        let p = self.dim();
        (-&self.t)
            .lu()
            .solve(&Matrix::identity(p, p))
            .expect("validated sub-intensity matrices are nonsingular")
    }
}

/// Zero pattern of a sub-intensity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    General,
    Coxian,
    Hyperexponential,
}

impl StructureKind {
    /// Whether the off-diagonal entry `(i, j)` may be nonzero.
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            StructureKind::General => i != j,
            StructureKind::Coxian => j == i + 1,
            StructureKind::Hyperexponential => false,
        }
    }

    /// Whether a sub-intensity matrix conforms to the pattern.
    pub fn matches(self, t: &Matrix) -> bool {
        let p = t.nrows();
        (0..p).all(|i| (0..p).all(|j| i == j || self.allows(i, j) || t[(i, j)] == 0.0))
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::General => "general",
            StructureKind::Coxian => "coxian",
            StructureKind::Hyperexponential => "hyperexponential",
        })
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" => Ok(StructureKind::General),
            "coxian" => Ok(StructureKind::Coxian),
            "hyperexponential" | "hyperexp" => Ok(StructureKind::Hyperexponential),
            other => Err(Error::invalid(format!("unknown structure '{other}'"))),
        }
    }
}

/// Dominant term `F̄(y) ∼ c y^power e^{−rate·y}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailDominant {
    pub rate: f64,
    pub power: usize,
    pub constant: f64,
}

/// A phase-type law PH(π, T).
#[derive(Debug, Clone)]
pub struct PhParams {
    pi: RowDVector<f64>,
    sub: SubIntensity,
    // Per state: sojourn rate and cumulative jump probabilities over
    // targets 0..p, with index p meaning absorption.
    jumps: Vec<(f64, Vec<f64>)>,
}

impl PartialEq for PhParams {
    fn eq(&self, other: &Self) -> bool {
        self.pi == other.pi && self.sub == other.sub
    }
}

impl PhParams {
    pub fn new(pi: RowDVector<f64>, sub: SubIntensity) -> Result<Self> {
        let p = sub.dim();
        if pi.len() != p {
            return Err(Error::invalid(format!(
                "initial distribution has length {}, matrix has dimension {p}",
                pi.len()
            )));
        }
        if let Some(k) = pi.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("initial probability pi[{k}] = {} is negative", pi[k])));
        }
        let sum = pi.sum();
        if (sum - 1.0).abs() > PI_SUM_TOL {
            return Err(Error::invalid(format!("initial probabilities sum to {sum}, expected 1")));
        }
        let jumps = jump_table(&sub);
        Ok(PhParams { pi, sub, jumps })
    }

    /// Convenience constructor from a row-major matrix.
    pub fn from_parts(pi: &[f64], t_row_major: &[f64]) -> Result<Self> {
        let p = pi.len();
        if t_row_major.len() != p * p {
            return Err(Error::invalid(format!(
                "matrix has {} entries, expected {}",
                t_row_major.len(),
                p * p
            )));
        }
        let sub = SubIntensity::new(Matrix::from_row_slice(p, p, t_row_major))?;
        Self::new(RowDVector::from_row_slice(pi), sub)
    }

    pub fn dim(&self) -> usize {
        self.sub.dim()
    }

    pub fn pi(&self) -> &RowDVector<f64> {
        &self.pi
    }

    pub fn sub(&self) -> &SubIntensity {
        &self.sub
    }

    pub fn t(&self) -> &Matrix {
        self.sub.matrix()
    }

    pub fn exit(&self) -> &DVector<f64> {
        self.sub.exit()
    }

    fn check_point(y: f64) -> Result<()> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::domain(format!("evaluation point must be positive and finite, got {y}")));
        }
        Ok(())
    }

    /// `π exp(Ty) t`.
    pub fn pdf(&self, y: f64) -> Result<f64> {
        Self::check_point(y)?;
        let e = matfun::expm(&(self.t() * y))?;
        Ok((&self.pi * e * self.exit())[0].max(0.0))
    }

    /// `π exp(Ty) e`.
    pub fn survival(&self, y: f64) -> Result<f64> {
        Self::check_point(y)?;
        let e = matfun::expm(&(self.t() * y))?;
        Ok((&self.pi * e).sum().clamp(0.0, 1.0))
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        Ok(1.0 - self.survival(y)?)
    }

    /// `E[Y^ν] = Γ(ν+1) π (−T)^{−ν} e`.
    pub fn moment(&self, nu: f64) -> Result<f64> {
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(Error::domain(format!("moment order must be nonnegative, got {nu}")));
        }
        if nu == 0.0 {
            return Ok(1.0);
        }
        let u = matfun::matpow_real(&(-self.t()), -nu)?;
        Ok(special::gamma(nu + 1.0) * (&self.pi * u).sum())
    }

    /// Absorption time of the underlying jump process.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let p = self.dim();
        let mut state = pick(self.pi.as_slice(), rng.random::<f64>());
        let mut time = 0.0;
        loop {
            let (rate, cum) = &self.jumps[state];
            let e: f64 = rng.sample(Exp1);
            time += e / rate;
            let u = rng.random::<f64>();
            let next = cum.iter().position(|&c| u < c).unwrap_or(p);
            if next == p {
                return time;
            }
            state = next;
        }
    }

    /// Dominant asymptotic term of the survival function.
    ///
    /// Only states reachable from the support of π are considered, so that
    /// the returned constant is the coefficient actually carried by π.
    pub fn tail_dominant(&self) -> Result<TailDominant> {
        let reach = reachable(self.pi.as_slice(), self.t());
        let q = reach.len();
        let t = Matrix::from_fn(q, q, |i, j| self.t()[(reach[i], reach[j])]);
        let pi = RowDVector::from_iterator(q, reach.iter().map(|&k| self.pi[k]));
        let eig = SchurForm::from_real(&t)?.eigenvalues();
        let norm = matfun::one_norm(&t);
        let lead = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let cluster_tol = 1e-8 * norm;
        // T is Metzler, so its rightmost eigenvalue is real; this guards
        // against rounding producing a complex leading pair.
        if eig
            .iter()
            .any(|z| (z.re - lead).abs() <= cluster_tol && z.im.abs() > cluster_tol)
        {
            return Err(Error::UnsupportedSpectrum(
                "dominant eigenvalue of T is complex".to_string(),
            ));
        }
        let rate = -lead;
        let a = &t + Matrix::identity(q, q) * rate;
        let power = jordan_size(&a, norm) - 1;
        let gap = eig
            .iter()
            .filter(|z| (z.re - lead).abs() > cluster_tol || z.im.abs() > cluster_tol)
            .map(|z| lead - z.re)
            .fold(f64::INFINITY, f64::min);
        // A^{n−1} exp(A y) converges to the projected leading coefficient;
        // the remaining components decay like exp(−gap·y).
        let y = if gap.is_finite() { 50.0 / gap } else { 0.0 };
        let mut lead_mat = matfun::expm(&(&a * y))?;
        for _ in 0..power {
            lead_mat = &a * lead_mat;
        }
        let factorial: f64 = (1..=power).map(|k| k as f64).product();
        let constant = (&pi * lead_mat).sum() / factorial;
        if !(constant > 0.0) {
            return Err(Error::UnsupportedSpectrum(format!(
                "leading tail coefficient {constant:e} is not positive"
            )));
        }
        Ok(TailDominant { rate, power, constant })
    }

    /// Random PH with the zero pattern of `kind`. Free rates are uniform on
    /// [0.1, 2]; the Coxian initial distribution is `e₁`.
    pub fn template<R: Rng + ?Sized>(kind: StructureKind, p: usize, rng: &mut R) -> Result<Self> {
        if p < 1 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let mut t = Matrix::zeros(p, p);
        for i in 0..p {
            let mut total = rng.random_range(0.1..=2.0);
            for j in 0..p {
                if kind.allows(i, j) {
                    let v = rng.random_range(0.1..=2.0);
                    t[(i, j)] = v;
                    total += v;
                }
            }
            t[(i, i)] = -total;
        }
        let pi = match kind {
            StructureKind::Coxian => {
                let mut pi = RowDVector::zeros(p);
                pi[0] = 1.0;
                pi
            }
            _ => {
                let w = RowDVector::from_fn(p, |_, _| rng.random_range(0.1..=1.0));
                let s = w.sum();
                w / s
            }
        };
        Self::new(pi, SubIntensity::new(t)?)
    }
}

fn jump_table(sub: &SubIntensity) -> Vec<(f64, Vec<f64>)> {
    let t = sub.matrix();
    let p = sub.dim();
    (0..p)
        .map(|i| {
            let rate = -t[(i, i)];
            let mut acc = 0.0;
            let mut cum = Vec::with_capacity(p);
            for j in 0..p {
                if j != i {
                    acc += t[(i, j)] / rate;
                }
                cum.push(acc);
            }
            (rate, cum)
        })
        .collect()
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding in Σπ: fall back to the last state with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn reachable(pi: &[f64], t: &Matrix) -> Vec<usize> {
    let p = pi.len();
    let mut seen: Vec<bool> = pi.iter().map(|&v| v > 0.0).collect();
    let mut stack: Vec<usize> = (0..p).filter(|&k| seen[k]).collect();
    while let Some(i) = stack.pop() {
        for j in 0..p {
            if j != i && !seen[j] && t[(i, j)] > 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    (0..p).filter(|&k| seen[k]).collect()
}

/// Size of the largest Jordan block of the (numerically) singular `a`:
/// the first `k` at which the nullity of `a^k` stops growing.
fn jordan_size(a: &Matrix, norm: f64) -> usize {
    let q = a.nrows();
    let nullity = |m: &Matrix, k: i32| {
        let sv = m.clone().singular_values();
        let thr = 1e-9 * norm.powi(k).max(f64::MIN_POSITIVE);
        sv.iter().filter(|&&s| s <= thr).count()
    };
    let mut power = a.clone();
    let mut prev = nullity(&power, 1);
    for k in 1..=q {
        let next_power = a * &power;
        let next = nullity(&next_power, k as i32 + 1);
        if next == prev {
            return k;
        }
        power = next_power;
        prev = next;
    }
    q
}

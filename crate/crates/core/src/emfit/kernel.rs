//! Per-observation E-step kernels.
//!
//! Every kernel reduces the data to four p×p sums, from which the
//! sufficient statistics are assembled in one place:
//!
//! - `et = Σ c·E[Θ exp(ΘTx)]` over exact points,
//! - `ee = Σ c·E[exp(ΘTv) − exp(ΘTw)]` over censored points,
//! - `sg = Σ c·E[Θ ∫_v^w exp(ΘTu) du]` over censored points,
//! - `k  = Σ c·E[Θ² ∫₀ˣ exp(ΘT(x−u)) tπ exp(ΘTu) du]`
//!   `+ Σ c·E[Θ (D_v − D_w)]`, with `D_y = ∫₀ʸ exp(ΘT(y−u)) eπ exp(ΘTu) du`,
//!
//! where `c` is the observation weight over its likelihood. Kernels come in
//! a dense form (Van Loan blocks and Schur–Parlett powers) and a spectral
//! form that works in the eigenbasis of T and accumulates divided
//! differences, so that the per-observation cost is O(p²).

use nalgebra::DVector;
use num_complex::Complex64;

use super::Observation;
use crate::error::{Error, Result};
use crate::matfun::scalar::{dd_exp, dd_pow, expm1};
use crate::matfun::{self, CMatrix, Eigen, Matrix, SchurForm, EIGEN_CONDITION_MAX};
use crate::mixing::{MixingStats, QuadratureRule};
use crate::phasetype::PhParams;
use crate::special::digamma;

/// Smallest likelihood contribution accepted by the E-step.
const MIN_LIKELIHOOD: f64 = 1e-300;

type CVector = Vec<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Reduced E-step output in the original coordinates.
#[derive(Debug, Clone)]
pub(crate) struct Sums {
    pub et: Matrix,
    pub ee: Matrix,
    pub sg: Matrix,
    pub k: Matrix,
    pub mix: MixingStats,
    pub loglik: f64,
    pub mass: f64,
}

pub(crate) trait Kernel: Sync {
    type Acc: Send;
    fn zero(&self) -> Self::Acc;
    fn add(&self, acc: &mut Self::Acc, obs: &Observation, weight: f64, index: usize) -> Result<()>;
    fn merge(&self, into: &mut Self::Acc, from: Self::Acc);
    fn finish(&self, acc: Self::Acc) -> Sums;
}

fn underflow(index: usize, what: &str, value: f64, obs: &Observation) -> Error {
    Error::Underflow { index, detail: format!("{what} {value:e} for {obs}") }
}

fn check_likelihood(index: usize, what: &str, ln_value: f64, obs: &Observation) -> Result<()> {
    if !(ln_value >= MIN_LIKELIHOOD.ln()) {
        return Err(underflow(index, what, ln_value.exp(), obs));
    }
    Ok(())
}

/// Log-moment summary used by the closed-form Gamma kernels.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LogMoment {
    mass: f64,
    log_sum: f64,
}

fn merge_nodes(into: &mut [f64], from: &[f64]) {
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Data shared by all kernels for one parameter value.
pub(crate) struct Context {
    pi: Vec<f64>,
    t: Matrix,
    exit: DVector<f64>,
    tinv: Matrix,
    /// `t·π`.
    tpi: Matrix,
    /// `e·π`.
    epi: Matrix,
    /// Largest real part in the spectrum of T; used as the exponential shift.
    rho: f64,
    p: usize,
}

impl Context {
    pub fn new(ph: &PhParams) -> Result<Self> {
        let p = ph.dim();
        let t = ph.t().clone();
        let exit = ph.exit().clone();
        let pi: Vec<f64> = ph.pi().iter().copied().collect();
        let tpi = Matrix::from_fn(p, p, |i, j| exit[i] * pi[j]);
        let epi = Matrix::from_fn(p, p, |_, j| pi[j]);
        let tinv = t.clone().try_inverse().ok_or_else(|| Error::domain("T is singular"))?;
        let rho = SchurForm::from_real(&t)?
            .eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Context { pi, t, exit, tinv, tpi, epi, rho, p })
    }

    fn pi_dot(&self, m: &Matrix, v: &DVector<f64>) -> f64 {
        (0..self.p).map(|i| self.pi[i] * (m.row(i) * v)[0]).sum()
    }

    fn pi_dot_e(&self, m: &Matrix) -> f64 {
        (0..self.p).map(|i| self.pi[i] * m.row(i).sum()).sum()
    }

    fn block_power(&self, b: &Matrix, y: f64, s: f64) -> Result<(Matrix, Matrix, Matrix)> {
        // I − C y for C = [[T, b], [0, T]]: (top-left power, top-right power, top-left log).
        let p = self.p;
        let a = Matrix::identity(p, p) - &self.t * y;
        let blk = matfun::van_loan_block(&a, &(b * -y));
        let schur = SchurForm::from_real(&blk)?;
        let pw = schur.powc(Complex64::new(s, 0.0))?.map(|z| z.re);
        let lg = schur.log()?.map(|z| z.re);
        Ok((
            pw.view((0, 0), (p, p)).into_owned(),
            pw.view((0, p), (p, p)).into_owned(),
            lg.view((0, 0), (p, p)).into_owned(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Accumulators

#[derive(Debug, Clone)]
pub(crate) struct DenseAcc<M> {
    et: Matrix,
    ee: Matrix,
    sg: Matrix,
    k: Matrix,
    mix: M,
    loglik: f64,
    mass: f64,
}

impl<M> DenseAcc<M> {
    fn new(p: usize, mix: M) -> Self {
        let z = Matrix::zeros(p, p);
        DenseAcc { et: z.clone(), ee: z.clone(), sg: z.clone(), k: z, mix, loglik: 0.0, mass: 0.0 }
    }

    fn merge_common(&mut self, from: &Self) {
        self.et += &from.et;
        self.ee += &from.ee;
        self.sg += &from.sg;
        self.k += &from.k;
        self.loglik += from.loglik;
        self.mass += from.mass;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SpecAcc<M> {
    dt: CVector,
    de: CVector,
    ds: CVector,
    ft: CMatrix,
    fe: CMatrix,
    mix: M,
    loglik: f64,
    mass: f64,
}

impl<M> SpecAcc<M> {
    fn new(p: usize, mix: M) -> Self {
        SpecAcc {
            dt: vec![ZERO; p],
            de: vec![ZERO; p],
            ds: vec![ZERO; p],
            ft: CMatrix::zeros(p, p),
            fe: CMatrix::zeros(p, p),
            mix,
            loglik: 0.0,
            mass: 0.0,
        }
    }

    fn merge_common(&mut self, from: &Self) {
        for (a, b) in [(&mut self.dt, &from.dt), (&mut self.de, &from.de), (&mut self.ds, &from.ds)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.ft += &from.ft;
        self.fe += &from.fe;
        self.loglik += from.loglik;
        self.mass += from.mass;
    }
}

/// Eigen-coordinates of T: `T = V diag(λ) V⁻¹`.
pub(crate) struct Spectral {
    lambda: CVector,
    v: CMatrix,
    vinv: CMatrix,
    /// `πV`.
    pi_v: CVector,
    /// `V⁻¹t`.
    vt: CVector,
    /// `V⁻¹e`.
    ve: CVector,
}

impl Spectral {
    /// `None` when T is not safely diagonalizable.
    pub fn new(ctx: &Context) -> Result<Option<Self>> {
        let Some(eig) = Eigen::of_real(&ctx.t, EIGEN_CONDITION_MAX)? else {
            return Ok(None);
        };
        let p = ctx.p;
        let pi_v = (0..p).map(|b| (0..p).map(|a| eig.vectors[(a, b)] * ctx.pi[a]).sum()).collect();
        let vt = (0..p).map(|a| (0..p).map(|b| eig.inverse[(a, b)] * ctx.exit[b]).sum()).collect();
        let ve = (0..p).map(|a| (0..p).map(|b| eig.inverse[(a, b)]).sum()).collect();
        Ok(Some(Spectral { lambda: eig.values, v: eig.vectors, vinv: eig.inverse, pi_v, vt, ve }))
    }

    fn back_diag(&self, d: &[Complex64]) -> Matrix {
        let mut vd = self.v.clone();
        for (b, db) in d.iter().enumerate() {
            for a in 0..vd.nrows() {
                vd[(a, b)] *= db;
            }
        }
        (vd * &self.vinv).map(|z| z.re)
    }

    fn finish<M>(&self, acc: &SpecAcc<M>) -> (Matrix, Matrix, Matrix, Matrix) {
        let p = self.lambda.len();
        // V⁻¹ tπ V and V⁻¹ eπ V are rank one.
        let inner = CMatrix::from_fn(p, p, |a, b| {
            acc.ft[(a, b)] * self.vt[a] * self.pi_v[b] + acc.fe[(a, b)] * self.ve[a] * self.pi_v[b]
        });
        let k = (&self.v * inner * &self.vinv).map(|z| z.re);
        (self.back_diag(&acc.dt), self.back_diag(&acc.de), self.back_diag(&acc.ds), k)
    }

    fn dot(&self, d: &[Complex64], right: &[Complex64]) -> f64 {
        d.iter().zip(&self.pi_v).zip(right).map(|((x, l), r)| l * x * r).sum::<Complex64>().re
    }
}

// ---------------------------------------------------------------------------
// Gamma mixing: closed forms via E[Θ^m exp(ΘC)] = Γ(α+m)/Γ(α) (I − C)^{−(α+m)}.

pub(crate) struct GammaDense<'a> {
    pub ctx: &'a Context,
    pub alpha: f64,
}

impl Kernel for GammaDense<'_> {
    type Acc = DenseAcc<LogMoment>;

    fn zero(&self) -> Self::Acc {
        DenseAcc::new(self.ctx.p, LogMoment::default())
    }

    fn add(&self, acc: &mut Self::Acc, obs: &Observation, weight: f64, index: usize) -> Result<()> {
        let ctx = self.ctx;
        let alpha = self.alpha;
        let p = ctx.p;
        match obs.bounds() {
            None => {
                let x = obs.value();
                let (tl, tr, lg) = ctx.block_power(&ctx.tpi, x, -alpha - 1.0)?;
                let f = alpha * ctx.pi_dot(&tl, &ctx.exit);
                check_likelihood(index, "density", f.ln(), obs)?;
                let c = weight / f;
                acc.et += &tl * (c * alpha);
                acc.k += &tr * (c * alpha);
                let inner = Matrix::identity(p, p) * digamma(alpha + 1.0) - lg;
                let elog = alpha * ctx.pi_dot(&(&tl * inner), &ctx.exit) / f;
                acc.mix.log_sum += weight * elog;
                acc.mix.mass += weight;
                acc.loglik += weight * f.ln();
            }
            Some((v, w)) => {
                let psi = digamma(alpha);
                let id = Matrix::identity(p, p);
                let zero = Matrix::zeros(p, p);
                // (Q, R, Q(ψ(α) − log)) at each end point.
                let end = |y: f64| -> Result<(Matrix, Matrix, Matrix)> {
                    if y == 0.0 {
                        return Ok((id.clone(), zero.clone(), &id * psi));
                    }
                    if y.is_infinite() {
                        return Ok((zero.clone(), zero.clone(), zero.clone()));
                    }
                    let (q, r, lg) = ctx.block_power(&ctx.epi, y, -alpha)?;
                    let ql = &q * (&id * psi - lg);
                    Ok((q, r, ql))
                };
                let (qv, rv, lv) = end(v)?;
                let (qw, rw, lw) = end(w)?;
                let diff = &qv - &qw;
                let prob = ctx.pi_dot_e(&diff);
                check_likelihood(index, "interval probability", prob.ln(), obs)?;
                let c = weight / prob;
                acc.ee += &diff * c;
                acc.sg += &ctx.tinv * (&qw - &qv) * c;
                acc.k += (rv - rw) * c;
                acc.mix.log_sum += weight * ctx.pi_dot_e(&(lv - lw)) / prob;
                acc.mix.mass += weight;
                acc.loglik += weight * prob.ln();
            }
        }
        acc.mass += weight;
        Ok(())
    }

    fn merge(&self, into: &mut Self::Acc, from: Self::Acc) {
        into.merge_common(&from);
        into.mix.mass += from.mix.mass;
        into.mix.log_sum += from.mix.log_sum;
    }

    fn finish(&self, acc: Self::Acc) -> Sums {
        Sums {
            mix: MixingStats::LogMoment { mass: acc.mix.mass, log_sum: acc.mix.log_sum },
            et: acc.et,
            ee: acc.ee,
            sg: acc.sg,
            k: acc.k,
            loglik: acc.loglik,
            mass: acc.mass,
        }
    }
}

pub(crate) struct GammaSpectral<'a> {
    pub ctx: &'a Context,
    pub spec: &'a Spectral,
    pub alpha: f64,
}

impl Kernel for GammaSpectral<'_> {
    type Acc = SpecAcc<LogMoment>;

    fn zero(&self) -> Self::Acc {
        SpecAcc::new(self.ctx.p, LogMoment::default())
    }

    fn add(&self, acc: &mut Self::Acc, obs: &Observation, weight: f64, index: usize) -> Result<()> {
        let sp = self.spec;
        let alpha = self.alpha;
        let p = self.ctx.p;
        // Spectrum of I − Ty.
        let z = |y: f64| -> CVector { sp.lambda.iter().map(|l| 1.0 - l * y).collect() };
        match obs.bounds() {
            None => {
                let x = obs.value();
                let s = Complex64::new(-alpha - 1.0, 0.0);
                let zx = z(x);
                let lz: CVector = zx.iter().map(|z| z.ln()).collect();
                let pw: CVector = lz.iter().map(|l| (s * l).exp()).collect();
                let f = alpha * sp.dot(&pw, &sp.vt);
                check_likelihood(index, "density", f.ln(), obs)?;
                let c = weight / f;
                for a in 0..p {
                    acc.dt[a] += pw[a] * (c * alpha);
                    for b in 0..p {
                        acc.ft[(a, b)] += dd_pow(zx[a], zx[b], s) * (-c * alpha * x);
                    }
                }
                let psi = digamma(alpha + 1.0);
                let weighted: CVector = pw.iter().zip(&lz).map(|(w, l)| w * (psi - l)).collect();
                acc.mix.log_sum += weight * alpha * sp.dot(&weighted, &sp.vt) / f;
                acc.mix.mass += weight;
                acc.loglik += weight * f.ln();
            }
            Some((v, w)) => {
                let s = Complex64::new(-alpha, 0.0);
                let psi = digamma(alpha);
                let zv = z(v);
                let qv: CVector = zv.iter().map(|z| (s * z.ln()).exp()).collect();
                // Q_v − Q_w, (Q_w − Q_v)T⁻¹ on the diagonal, and the log terms.
                let (diff, single, logs): (CVector, CVector, CVector) = if w.is_infinite() {
                    (
                        qv.clone(),
                        qv.iter().zip(&sp.lambda).map(|(q, l)| -q / l).collect(),
                        qv.iter().zip(&zv).map(|(q, z)| q * (psi - z.ln())).collect(),
                    )
                } else {
                    let zw = z(w);
                    let dd: CVector = zw.iter().zip(&zv).map(|(a, b)| dd_pow(*a, *b, s)).collect();
                    (
                        dd.iter().zip(&sp.lambda).map(|(d, l)| d * l * (w - v)).collect(),
                        dd.iter().map(|d| -d * (w - v)).collect(),
                        (0..p)
                            .map(|a| {
                                let qw = (s * zw[a].ln()).exp();
                                qv[a] * (psi - zv[a].ln()) - qw * (psi - zw[a].ln())
                            })
                            .collect(),
                    )
                };
                let prob = sp.dot(&diff, &sp.ve);
                check_likelihood(index, "interval probability", prob.ln(), obs)?;
                let c = weight / prob;
                for a in 0..p {
                    acc.de[a] += diff[a] * c;
                    acc.ds[a] += single[a] * c;
                }
                if v > 0.0 {
                    for a in 0..p {
                        for b in 0..p {
                            acc.fe[(a, b)] += dd_pow(zv[a], zv[b], s) * (-c * v);
                        }
                    }
                }
                if w.is_finite() {
                    let zw = z(w);
                    for a in 0..p {
                        for b in 0..p {
                            acc.fe[(a, b)] -= dd_pow(zw[a], zw[b], s) * (-c * w);
                        }
                    }
                }
                acc.mix.log_sum += weight * sp.dot(&logs, &sp.ve) / prob;
                acc.mix.mass += weight;
                acc.loglik += weight * prob.ln();
            }
        }
        acc.mass += weight;
        Ok(())
    }

    fn merge(&self, into: &mut Self::Acc, from: Self::Acc) {
        into.merge_common(&from);
        into.mix.mass += from.mix.mass;
        into.mix.log_sum += from.mix.log_sum;
    }

    fn finish(&self, acc: Self::Acc) -> Sums {
        let (et, ee, sg, k) = self.spec.finish(&acc);
        Sums {
            et,
            ee,
            sg,
            k,
            mix: MixingStats::LogMoment { mass: acc.mix.mass, log_sum: acc.mix.log_sum },
            loglik: acc.loglik,
            mass: acc.mass,
        }
    }
}

// ---------------------------------------------------------------------------
// Quadrature over Θ. Each node's contribution is computed relative to
// exp(θρy) (y = x for exact points, v for censored ones) and the node sum is
// normalized by its largest term before dividing by the likelihood.

/// Per-observation node scaling: returns `(ln likelihood, cⱼ / f̃)` where
/// `cⱼ = exp(κⱼ − K)` and `f̃ = Σ cⱼ ãⱼ`.
fn node_scaling(kappa: &[f64], scaled: &[f64]) -> Option<(f64, Vec<f64>)> {
    let top = kappa
        .iter()
        .zip(scaled)
        .filter(|(_, a)| **a > 0.0)
        .map(|(k, a)| k + a.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return None;
    }
    let c: Vec<f64> = kappa.iter().map(|k| (k - top).exp()).collect();
    let total: f64 = c.iter().zip(scaled).map(|(c, a)| c * a.max(0.0)).sum();
    Some((top + total.ln(), c.into_iter().map(|c| c / total).collect()))
}

pub(crate) struct QuadDense<'a> {
    pub ctx: &'a Context,
    pub rule: &'a QuadratureRule,
}

impl QuadDense<'_> {
    fn shifted(&self, theta: f64) -> Matrix {
        let p = self.ctx.p;
        (&self.ctx.t - Matrix::identity(p, p) * self.ctx.rho) * theta
    }
}

impl Kernel for QuadDense<'_> {
    type Acc = DenseAcc<Vec<f64>>;

    fn zero(&self) -> Self::Acc {
        DenseAcc::new(self.ctx.p, vec![0.0; self.rule.len()])
    }

    fn add(&self, acc: &mut Self::Acc, obs: &Observation, weight: f64, index: usize) -> Result<()> {
        let ctx = self.ctx;
        let rule = self.rule;
        let n = rule.len();
        let p = ctx.p;
        let ln_mass: Vec<f64> = rule.masses.iter().map(|m| m.ln()).collect();
        match obs.bounds() {
            None => {
                let x = obs.value();
                let mut parts = Vec::with_capacity(n);
                let mut kappa = Vec::with_capacity(n);
                let mut scaled = Vec::with_capacity(n);
                for (j, &theta) in rule.nodes.iter().enumerate() {
                    let (e, conv) = matfun::vanloan_pair(&self.shifted(theta), &(&ctx.tpi * theta), x)?;
                    scaled.push(theta * ctx.pi_dot(&e, &ctx.exit));
                    kappa.push(ln_mass[j] + theta * ctx.rho * x);
                    parts.push((e, conv));
                }
                let (ln_f, g) = node_scaling(&kappa, &scaled)
                    .ok_or_else(|| underflow(index, "density", 0.0, obs))?;
                check_likelihood(index, "density", ln_f, obs)?;
                for (j, (e, conv)) in parts.iter().enumerate() {
                    let theta = rule.nodes[j];
                    let gj = weight * g[j];
                    acc.et += e * (gj * theta);
                    acc.k += conv * (gj * theta);
                    acc.mix[j] += gj * scaled[j].max(0.0);
                }
                acc.loglik += weight * ln_f;
            }
            Some((v, w)) => {
                let id = Matrix::identity(p, p);
                let zero = Matrix::zeros(p, p);
                let mut parts = Vec::with_capacity(n);
                let mut kappa = Vec::with_capacity(n);
                let mut scaled = Vec::with_capacity(n);
                for (j, &theta) in rule.nodes.iter().enumerate() {
                    let a = self.shifted(theta);
                    let b = &ctx.epi * theta;
                    let (sv, dv) = if v > 0.0 { matfun::vanloan_pair(&a, &b, v)? } else { (id.clone(), zero.clone()) };
                    let (sw, dw) = if w.is_finite() {
                        let (sw, dw) = matfun::vanloan_pair(&a, &b, w)?;
                        let back = (theta * ctx.rho * (w - v)).exp();
                        (sw * back, dw * back)
                    } else {
                        (zero.clone(), zero.clone())
                    };
                    let diff = &sv - &sw;
                    scaled.push(ctx.pi_dot_e(&diff));
                    kappa.push(ln_mass[j] + theta * ctx.rho * v);
                    parts.push((diff, &ctx.tinv * (sw - sv), dv - dw));
                }
                let (ln_p, g) = node_scaling(&kappa, &scaled)
                    .ok_or_else(|| underflow(index, "interval probability", 0.0, obs))?;
                check_likelihood(index, "interval probability", ln_p, obs)?;
                for (j, (diff, single, conv)) in parts.iter().enumerate() {
                    let gj = weight * g[j];
                    acc.ee += diff * gj;
                    acc.sg += single * gj;
                    acc.k += conv * gj;
                    acc.mix[j] += gj * scaled[j].max(0.0);
                }
                acc.loglik += weight * ln_p;
            }
        }
        acc.mass += weight;
        Ok(())
    }

    fn merge(&self, into: &mut Self::Acc, from: Self::Acc) {
        into.merge_common(&from);
        merge_nodes(&mut into.mix, &from.mix);
    }

    fn finish(&self, acc: Self::Acc) -> Sums {
        Sums {
            et: acc.et,
            ee: acc.ee,
            sg: acc.sg,
            k: acc.k,
            mix: MixingStats::Nodes { nodes: self.rule.nodes.clone(), weights: acc.mix },
            loglik: acc.loglik,
            mass: acc.mass,
        }
    }
}

pub(crate) struct QuadSpectral<'a> {
    pub ctx: &'a Context,
    pub spec: &'a Spectral,
    pub rule: &'a QuadratureRule,
}

/// `(e^z − 1)/z`.
fn exprel(z: Complex64) -> Complex64 {
    if z.norm() == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        expm1(z) / z
    }
}

impl Kernel for QuadSpectral<'_> {
    type Acc = SpecAcc<Vec<f64>>;

    fn zero(&self) -> Self::Acc {
        SpecAcc::new(self.ctx.p, vec![0.0; self.rule.len()])
    }

    fn add(&self, acc: &mut Self::Acc, obs: &Observation, weight: f64, index: usize) -> Result<()> {
        let sp = self.spec;
        let rule = self.rule;
        let rho = self.ctx.rho;
        let p = self.ctx.p;
        let n = rule.len();
        match obs.bounds() {
            None => {
                let x = obs.value();
                let mut args = Vec::with_capacity(n);
                let mut kappa = Vec::with_capacity(n);
                let mut scaled = Vec::with_capacity(n);
                for (&theta, &m) in rule.nodes.iter().zip(&rule.masses) {
                    let arg: CVector = sp.lambda.iter().map(|l| (l - rho) * (theta * x)).collect();
                    let s: CVector = arg.iter().map(|a| a.exp()).collect();
                    scaled.push(theta * sp.dot(&s, &sp.vt));
                    kappa.push(m.ln() + theta * rho * x);
                    args.push(arg);
                }
                let (ln_f, g) = node_scaling(&kappa, &scaled)
                    .ok_or_else(|| underflow(index, "density", 0.0, obs))?;
                check_likelihood(index, "density", ln_f, obs)?;
                for (j, arg) in args.iter().enumerate() {
                    let gj = weight * g[j];
                    if gj == 0.0 {
                        continue;
                    }
                    let theta = rule.nodes[j];
                    for a in 0..p {
                        acc.dt[a] += arg[a].exp() * (gj * theta);
                        for b in 0..p {
                            acc.ft[(a, b)] += dd_exp(arg[a], arg[b]) * (gj * theta * theta * x);
                        }
                    }
                    acc.mix[j] += gj * scaled[j].max(0.0);
                }
                acc.loglik += weight * ln_f;
            }
            Some((v, w)) => {
                struct Node {
                    av: CVector,
                    aw: Option<CVector>,
                    diff: CVector,
                    single: CVector,
                }
                let mut parts = Vec::with_capacity(n);
                let mut kappa = Vec::with_capacity(n);
                let mut scaled = Vec::with_capacity(n);
                for (&theta, &m) in rule.nodes.iter().zip(&rule.masses) {
                    let av: CVector = sp.lambda.iter().map(|l| (l - rho) * (theta * v)).collect();
                    let sv: CVector = av.iter().map(|a| a.exp()).collect();
                    let node = if w.is_finite() {
                        let h = w - v;
                        let zh: CVector = sp.lambda.iter().map(|l| l * (theta * h)).collect();
                        Node {
                            diff: sv.iter().zip(&zh).map(|(s, z)| -s * expm1(*z)).collect(),
                            single: sv.iter().zip(&zh).map(|(s, z)| s * exprel(*z) * h).collect(),
                            aw: Some(av.iter().zip(&zh).map(|(a, z)| a + z).collect()),
                            av,
                        }
                    } else {
                        Node {
                            diff: sv.clone(),
                            single: sv.iter().zip(&sp.lambda).map(|(s, l)| -s / (l * theta)).collect(),
                            aw: None,
                            av,
                        }
                    };
                    scaled.push(sp.dot(&node.diff, &sp.ve));
                    kappa.push(m.ln() + theta * rho * v);
                    parts.push(node);
                }
                let (ln_p, g) = node_scaling(&kappa, &scaled)
                    .ok_or_else(|| underflow(index, "interval probability", 0.0, obs))?;
                check_likelihood(index, "interval probability", ln_p, obs)?;
                for (j, node) in parts.iter().enumerate() {
                    let gj = weight * g[j];
                    if gj == 0.0 {
                        continue;
                    }
                    let theta = rule.nodes[j];
                    for a in 0..p {
                        acc.de[a] += node.diff[a] * gj;
                        acc.ds[a] += node.single[a] * (gj * theta);
                        for b in 0..p {
                            let mut f = ZERO;
                            if v > 0.0 {
                                f += dd_exp(node.av[a], node.av[b]) * v;
                            }
                            if let Some(aw) = &node.aw {
                                f -= dd_exp(aw[a], aw[b]) * w;
                            }
                            acc.fe[(a, b)] += f * (gj * theta);
                        }
                    }
                    acc.mix[j] += gj * scaled[j].max(0.0);
                }
                acc.loglik += weight * ln_p;
            }
        }
        acc.mass += weight;
        Ok(())
    }

    fn merge(&self, into: &mut Self::Acc, from: Self::Acc) {
        into.merge_common(&from);
        merge_nodes(&mut into.mix, &from.mix);
    }

    fn finish(&self, acc: Self::Acc) -> Sums {
        let (et, ee, sg, k) = self.spec.finish(&acc);
        Sums {
            et,
            ee,
            sg,
            k,
            mix: MixingStats::Nodes { nodes: self.rule.nodes.clone(), weights: acc.mix },
            loglik: acc.loglik,
            mass: acc.mass,
        }
    }
}

impl Context {
    /// Posterior expected starts, occupations, jumps and exits.
    pub fn assemble(&self, s: &Sums) -> (DVector<f64>, DVector<f64>, Matrix, DVector<f64>) {
        let p = self.p;
        let e = DVector::from_element(p, 1.0);
        let et_t = &s.et * &self.exit;
        let ee_e = &s.ee * &e;
        let pi_sg: Vec<f64> = (0..p).map(|k| (0..p).map(|i| self.pi[i] * s.sg[(i, k)]).sum()).collect();
        let pi_et: Vec<f64> = (0..p).map(|k| (0..p).map(|i| self.pi[i] * s.et[(i, k)]).sum()).collect();
        let b = DVector::from_fn(p, |k, _| (self.pi[k] * (et_t[k] + ee_e[k])).max(0.0));
        let exit = DVector::from_fn(p, |k, _| (self.exit[k] * (pi_et[k] + pi_sg[k])).max(0.0));
        let tz = DVector::from_fn(p, |k, _| (pi_sg[k] + s.k[(k, k)]).max(0.0));
        let n = Matrix::from_fn(p, p, |k, l| {
            if k == l || self.t[(k, l)] == 0.0 {
                0.0
            } else {
                (self.t[(k, l)] * (pi_sg[k] + s.k[(l, k)])).max(0.0)
            }
        });
        (b, tz, n, exit)
    }
}

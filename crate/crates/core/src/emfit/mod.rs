//! EM estimation of scaled phase-type models from exact and censored
//! observations, and fitting to a known density.

mod kernel;

use std::fmt;

use nalgebra::{DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cph::CphModel;
use crate::error::{Error, Result};
use crate::matfun::Matrix;
use crate::mixing::{MixingFamily, MixingStats, DEFAULT_NODES};
use crate::phasetype::{PhParams, StructureKind, SubIntensity};
use crate::quad;
use kernel::{Context, GammaDense, GammaSpectral, Kernel, QuadDense, QuadSpectral, Spectral, Sums};

/// Observations handled per work unit. Fixed so that the reduction order,
/// and hence every floating-point sum, is independent of the thread count.
const CHUNK: usize = 32;
/// States whose expected occupation falls below this fraction of the data
/// keep their previous rates.
const FREEZE_TOL: f64 = 1e-12;
/// Default number of nodes in the outer rule of [`fit_density`].
pub const DEFAULT_X_NODES: usize = 200;
/// Allowed deviation of a target density's mass from one.
const TARGET_MASS_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Exact(f64),
    /// Value known to lie in `(v, w]`; `w` may be infinite.
    Interval(f64, f64),
    /// Value known to exceed `v`.
    RightCensored(f64),
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Observation::Exact(x) => x > 0.0 && x.is_finite(),
            Observation::Interval(v, w) => v >= 0.0 && v.is_finite() && w > v,
            Observation::RightCensored(v) => v > 0.0 && v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid observation {self}")))
        }
    }

    pub fn is_censored(&self) -> bool {
        !matches!(self, Observation::Exact(_))
    }

    /// Censoring interval `(v, w]`, or `None` for exact values.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Observation::Exact(_) => None,
            Observation::Interval(v, w) => Some((v, w)),
            Observation::RightCensored(v) => Some((v, f64::INFINITY)),
        }
    }

    /// The exact value, or a representative point of the interval.
    pub fn value(&self) -> f64 {
        match *self {
            Observation::Exact(x) => x,
            Observation::Interval(v, w) if w.is_finite() => 0.5 * (v + w),
            Observation::Interval(v, _) | Observation::RightCensored(v) => v,
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::Exact(x) => write!(f, "x = {x}"),
            Observation::Interval(v, w) => write!(f, "x in ({v}, {w}]"),
            Observation::RightCensored(v) => write!(f, "x > {v}"),
        }
    }
}

/// Posterior expectations of the complete-data sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmStats {
    /// Expected number of starts in each state.
    pub b: DVector<f64>,
    /// Expected `Θ·Z_k`, the occupation time on the unscaled clock.
    pub tz: DVector<f64>,
    /// Expected jump counts `N_kl`; zero diagonal.
    pub n: Matrix,
    /// Expected exits from each state.
    pub exit: DVector<f64>,
    pub mix: MixingStats,
    /// Total observation weight.
    pub m: f64,
    /// Log-likelihood of the parameters the statistics were computed at.
    pub loglik: f64,
}

/// Which E-step implementation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstepOptions {
    /// Use the closed form for Gamma mixing instead of quadrature over Θ.
    pub closed_form: bool,
    /// Work in the eigenbasis of T when it is well conditioned.
    pub spectral: bool,
}

impl Default for EstepOptions {
    fn default() -> Self {
        EstepOptions { closed_form: true, spectral: true }
    }
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub dim: usize,
    pub structure: StructureKind,
    /// Family and starting parameter of the scaling law.
    pub mixing: MixingFamily,
    pub max_iter: usize,
    /// Stop once the absolute log-likelihood change falls below this.
    pub tol: f64,
    /// Quadrature nodes for Θ.
    pub nodes: usize,
    pub seed: u64,
    /// Estimate π for Coxian structures instead of fixing it at `e₁`.
    pub free_pi: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Nodes of the outer rule used by [`fit_density`].
    pub x_nodes: usize,
    pub estep: EstepOptions,
}

impl EmConfig {
    pub fn new(dim: usize, structure: StructureKind, mixing: MixingFamily) -> Self {
        EmConfig {
            dim,
            structure,
            mixing,
            max_iter: 2000,
            tol: 1e-8,
            nodes: DEFAULT_NODES,
            seed: 1,
            free_pi: false,
            threads: None,
            x_nodes: DEFAULT_X_NODES,
            estep: EstepOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.nodes < 8 {
            return Err(Error::invalid(format!("quadrature needs at least 8 nodes, got {}", self.nodes)));
        }
        if self.x_nodes < 8 {
            return Err(Error::invalid(format!("outer rule needs at least 8 nodes, got {}", self.x_nodes)));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("thread count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: CphModel,
    /// Log-likelihood of the model at the start of each iteration; the last
    /// entry belongs to `model`.
    pub trace: Vec<f64>,
    /// M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// States whose rates were frozen at some iteration, ascending.
    pub frozen: Vec<usize>,
}

impl FitReport {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Log-likelihood with the indices of observations of zero likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglikReport {
    /// `−∞` when `zero` is non-empty.
    pub value: f64,
    pub zero: Vec<usize>,
}

fn check_data(data: &[Observation], weights: Option<&[f64]>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    for (i, obs) in data.iter().enumerate() {
        obs.validate().map_err(|e| Error::invalid(format!("observation {i}: {e}")))?;
    }
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::invalid(format!("{} weights for {} observations", w.len(), data.len())));
        }
        if w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("observation weights must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// Likelihood contribution of one observation, evaluated with the model's
/// transform route.
fn contribution(model: &CphModel, obs: &Observation) -> Result<f64> {
    Ok(match *obs {
        Observation::Exact(x) => model.pdf(x)?,
        Observation::RightCensored(v) => model.survival(v)?,
        Observation::Interval(v, w) => {
            let sv = if v == 0.0 { 1.0 } else { model.survival(v)? };
            let sw = if w.is_infinite() { 0.0 } else { model.survival(w)? };
            sv - sw
        }
    })
}

pub fn loglik_report(model: &CphModel, data: &[Observation]) -> Result<LoglikReport> {
    check_data(data, None)?;
    let mut value = 0.0;
    let mut zero = Vec::new();
    for (i, obs) in data.iter().enumerate() {
        let c = contribution(model, obs)?;
        if c > 0.0 {
            value += c.ln();
        } else {
            zero.push(i);
        }
    }
    if !zero.is_empty() {
        value = f64::NEG_INFINITY;
    }
    Ok(LoglikReport { value, zero })
}

/// `Σ log f(x)` over exact points plus `Σ log P(X ∈ (v, w])` over censored
/// ones; `−∞` when some observation has zero likelihood.
pub fn loglik(model: &CphModel, data: &[Observation]) -> Result<f64> {
    Ok(loglik_report(model, data)?.value)
}

fn run<K: Kernel>(kernel: &K, data: &[Observation], weights: Option<&[f64]>) -> Result<Sums> {
    let chunks: Vec<Result<K::Acc>> = data
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = kernel.zero();
            for (i, obs) in chunk.iter().enumerate() {
                let index = c * CHUNK + i;
                let w = weights.map_or(1.0, |w| w[index]);
                if w > 0.0 {
                    kernel.add(&mut acc, obs, w, index)?;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = kernel.zero();
    for acc in chunks {
        kernel.merge(&mut total, acc?);
    }
    Ok(kernel.finish(total))
}

/// Posterior expectations at the current parameters. Exact and censored
/// observations may be mixed; `weights` default to one.
pub fn estep(
    model: &CphModel,
    data: &[Observation],
    weights: Option<&[f64]>,
    opts: EstepOptions,
) -> Result<EmStats> {
    check_data(data, weights)?;
    let ctx = Context::new(model.ph())?;
    let spec = if opts.spectral { Spectral::new(&ctx)? } else { None };
    let sums = match (model.mixing(), opts.closed_form, &spec) {
        (MixingFamily::Gamma { alpha }, true, Some(spec)) => {
            run(&GammaSpectral { ctx: &ctx, spec, alpha: *alpha }, data, weights)?
        }
        (MixingFamily::Gamma { alpha }, true, None) => run(&GammaDense { ctx: &ctx, alpha: *alpha }, data, weights)?,
        (_, _, Some(spec)) => run(&QuadSpectral { ctx: &ctx, spec, rule: model.rule()? }, data, weights)?,
        (_, _, None) => run(&QuadDense { ctx: &ctx, rule: model.rule()? }, data, weights)?,
    };
    let (b, tz, n, exit) = ctx.assemble(&sums);
    Ok(EmStats { b, tz, n, exit, mix: sums.mix, m: sums.mass, loglik: sums.loglik })
}

#[derive(Debug, Clone)]
pub struct MstepOutcome {
    pub ph: PhParams,
    pub mixing: MixingFamily,
    /// States whose rates were kept because they were never visited.
    pub frozen: Vec<usize>,
}

/// Maximizes the expected complete-data log-likelihood. Rates outside the
/// zero pattern of `structure` stay zero.
pub fn mstep(stats: &EmStats, prev: &CphModel, structure: StructureKind) -> Result<MstepOutcome> {
    let p = prev.ph().dim();
    if stats.b.len() != p {
        return Err(Error::invalid(format!("statistics of dimension {} for a model of dimension {p}", stats.b.len())));
    }
    let total: f64 = stats.b.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Estimation(format!("expected starts sum to {total}")));
    }
    let pi = RowDVector::from_iterator(p, stats.b.iter().map(|b| b / total));
    let old = prev.ph().t();
    let mut t = Matrix::zeros(p, p);
    let mut frozen = Vec::new();
    for k in 0..p {
        let occ = stats.tz[k];
        if !(occ > FREEZE_TOL * stats.m) {
            frozen.push(k);
            t.row_mut(k).copy_from(&old.row(k));
            continue;
        }
        let mut out = stats.exit[k] / occ;
        for l in 0..p {
            if l != k && structure.allows(k, l) {
                let r = stats.n[(k, l)] / occ;
                t[(k, l)] = r;
                out += r;
            }
        }
        t[(k, k)] = -out;
    }
    let sub = SubIntensity::new(t).map_err(|e| Error::Estimation(format!("M-step produced {e}")))?;
    let ph = PhParams::new(pi, sub).map_err(|e| Error::Estimation(format!("M-step produced {e}")))?;
    let mixing = prev.mixing().mstep(&stats.mix)?;
    Ok(MstepOutcome { ph, mixing, frozen })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

fn weighted_median(data: &[Observation], weights: Option<&[f64]>) -> f64 {
    let mut pts: Vec<(f64, f64)> =
        data.iter().enumerate().map(|(i, o)| (o.value(), weights.map_or(1.0, |w| w[i]))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * pts.iter().map(|p| p.1).sum::<f64>();
    let mut acc = 0.0;
    for (x, w) in &pts {
        acc += w;
        if acc >= half {
            return *x;
        }
    }
    pts.last().map_or(1.0, |p| p.0)
}

/// Random template of the configured structure, rescaled so that the
/// starting model's median matches the data's.
fn initial_model(config: &EmConfig, data: &[Observation], weights: Option<&[f64]>) -> Result<CphModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ph = PhParams::template(config.structure, config.dim, &mut rng)?;
    if config.structure == StructureKind::Coxian && config.free_pi {
        let pi = RowDVector::from_element(config.dim, 1.0 / config.dim as f64);
        ph = PhParams::new(pi, ph.sub().clone())?;
    }
    let probe = CphModel::new(ph.clone(), config.mixing.clone());
    let target = weighted_median(data, weights);
    if let (Ok(current), true) = (probe.quantile(0.5), target > 0.0) {
        let sub = SubIntensity::new(ph.t() * (current / target))?;
        ph = PhParams::new(ph.pi().clone(), sub)?;
    }
    CphModel::with_nodes(ph, config.mixing.clone(), config.nodes)
}

fn iterate(data: &[Observation], weights: Option<&[f64]>, config: &EmConfig) -> Result<FitReport> {
    let mut model = initial_model(config, data, weights)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut frozen = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let at = |e: Error| Error::AtIteration { iteration: iterations, source: Box::new(e) };
        let stats = estep(&model, data, weights, config.estep).map_err(at)?;
        let ll = stats.loglik;
        if let Some(prev) = trace.last() {
            if (ll - prev).abs() < config.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == config.max_iter {
            break;
        }
        let out = mstep(&stats, &model, config.structure).map_err(at)?;
        frozen.extend(out.frozen);
        model = CphModel::with_nodes(out.ph, out.mixing, config.nodes)?;
        iterations += 1;
    }
    frozen.sort_unstable();
    frozen.dedup();
    Ok(FitReport { model, trace, iterations, converged, frozen })
}

/// Maximum-likelihood fit by EM.
pub fn fit(data: &[Observation], config: &EmConfig) -> Result<FitReport> {
    config.validate()?;
    check_data(data, None)?;
    with_threads(config.threads, || iterate(data, None, config))
}

/// Weighted variant of [`fit`]; each observation counts `weights[i]` times.
pub fn fit_weighted(data: &[Observation], weights: &[f64], config: &EmConfig) -> Result<FitReport> {
    config.validate()?;
    check_data(data, Some(weights))?;
    with_threads(config.threads, || iterate(data, Some(weights), config))
}

/// Outer Gauss–Legendre rule in log x over `[lo, hi]` weighted by `h`.
pub fn target_rule(h: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::invalid(format!("target support [{lo}, {hi}] must satisfy 0 < lo < hi < inf")));
    }
    let (u, w) = quad::gauss_legendre_on(n, lo.ln(), hi.ln());
    let mut xs = Vec::with_capacity(n);
    let mut masses = Vec::with_capacity(n);
    for (u, w) in u.into_iter().zip(w) {
        let x = u.exp();
        let hx = h(x);
        if !(hx.is_finite() && hx >= 0.0) {
            return Err(Error::invalid(format!("target density is negative or not finite at {x}")));
        }
        xs.push(x);
        masses.push(w * x * hx);
    }
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > TARGET_MASS_TOL {
        return Err(Error::invalid(format!("target density integrates to {total} on [{lo}, {hi}], not 1")));
    }
    Ok((xs, masses))
}

/// Composite Gauss–Legendre rule in x over the panels between consecutive
/// `edges`, for targets that are only piecewise smooth. At least `n` nodes
/// in total and two per panel.
pub fn panel_rule(h: &dyn Fn(f64) -> f64, edges: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let ordered = edges.windows(2).all(|w| w[1] > w[0]);
    if edges.len() < 2 || !ordered || !(edges[0] >= 0.0) || !edges[edges.len() - 1].is_finite() {
        return Err(Error::invalid("panel edges must increase from a nonnegative start to a finite end"));
    }
    let panels = edges.len() - 1;
    let per = n.div_ceil(panels).max(2);
    let mut xs = Vec::with_capacity(per * panels);
    let mut masses = Vec::with_capacity(per * panels);
    for w in edges.windows(2) {
        let (nodes, weights) = quad::gauss_legendre_on(per, w[0], w[1]);
        for (x, wt) in nodes.into_iter().zip(weights) {
            let hx = h(x);
            if !(hx.is_finite() && hx >= 0.0) {
                return Err(Error::invalid(format!("target density is negative or not finite at {x}")));
            }
            xs.push(x);
            masses.push(wt * hx);
        }
    }
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > TARGET_MASS_TOL {
        let (lo, hi) = (edges[0], edges[panels]);
        return Err(Error::invalid(format!("target density integrates to {total} on [{lo}, {hi}], not 1")));
    }
    Ok((xs, masses))
}

/// Fits to a known density `h` supported (effectively) on `[lo, hi]` by
/// running EM on the outer quadrature rule; the trace holds `∫ h log f`.
pub fn fit_density(h: &dyn Fn(f64) -> f64, support: (f64, f64), config: &EmConfig) -> Result<FitReport> {
    config.validate()?;
    let (xs, masses) = target_rule(h, support.0, support.1, config.x_nodes)?;
    fit_rule(xs, masses, config)
}

/// [`fit_density`] on the composite rule of [`panel_rule`].
pub fn fit_density_panels(h: &dyn Fn(f64) -> f64, edges: &[f64], config: &EmConfig) -> Result<FitReport> {
    config.validate()?;
    let (xs, masses) = panel_rule(h, edges, config.x_nodes)?;
    fit_rule(xs, masses, config)
}

fn fit_rule(xs: Vec<f64>, masses: Vec<f64>, config: &EmConfig) -> Result<FitReport> {
    let (data, weights): (Vec<Observation>, Vec<f64>) =
        xs.into_iter().zip(masses).filter(|(_, m)| *m > 0.0).map(|(x, m)| (Observation::Exact(x), m)).unzip();
    fit_weighted(&data, &weights, config)
}

#[cfg(test)]
mod tests;

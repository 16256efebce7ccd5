use super::*;
use crate::matfun::expm;
use crate::mixing::GenericDensity;
use crate::special::digamma;
use crate::testutil::{integrate_log, ks_distance, random_coxian, random_general};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Exp};

const DENSE: EstepOptions = EstepOptions { closed_form: true, spectral: false };
const SPECTRAL: EstepOptions = EstepOptions { closed_form: true, spectral: true };
const QUAD_DENSE: EstepOptions = EstepOptions { closed_form: false, spectral: false };
const QUAD_SPECTRAL: EstepOptions = EstepOptions { closed_form: false, spectral: true };

fn coxian2() -> PhParams {
    PhParams::from_parts(&[1.0, 0.0], &[-1.5, 1.0, 0.0, -0.7]).unwrap()
}

fn general2() -> PhParams {
    PhParams::from_parts(&[0.6, 0.4], &[-2.0, 0.8, 0.3, -0.9]).unwrap()
}

fn gamma_model(ph: PhParams, alpha: f64, nodes: usize) -> CphModel {
    CphModel::with_nodes(ph, MixingFamily::gamma(alpha).unwrap(), nodes).unwrap()
}

fn per_obs(s: &EmStats) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = 1.0 / s.m;
    (
        s.b.iter().map(|v| v * k).collect(),
        s.tz.iter().map(|v| v * k).collect(),
        s.n.iter().map(|v| v * k).collect(),
        s.exit.iter().map(|v| v * k).collect(),
    )
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn assert_stats_close(a: &EmStats, b: &EmStats, tol: f64) {
    let (ab, at, an, ae) = per_obs(a);
    let (bb, bt, bn, be) = per_obs(b);
    for (name, x, y) in [("b", &ab, &bb), ("tz", &at, &bt), ("n", &an, &bn), ("exit", &ae, &be)] {
        let d = max_rel(x, y);
        assert!(d < tol, "{name}: {x:?} vs {y:?} (rel {d:e})");
    }
    assert!((a.loglik - b.loglik).abs() < tol * a.loglik.abs().max(1.0), "{} vs {}", a.loglik, b.loglik);
}

fn mean_log_theta(s: &EmStats) -> f64 {
    match &s.mix {
        MixingStats::LogMoment { mass, log_sum } => log_sum / mass,
        MixingStats::Nodes { nodes, weights } => {
            let m: f64 = weights.iter().sum();
            nodes.iter().zip(weights).map(|(t, w)| w * t.ln()).sum::<f64>() / m
        }
        MixingStats::None => panic!("no mixing statistics"),
    }
}

/// Unnormalized conditional statistics of a PH given `Y = y`, by adaptive
/// quadrature over the time of each transition: `(f, B, Z, N, exit)` with
/// every statistic multiplied by the density `f`.
fn ph_exact_oracle(ph: &PhParams, y: f64) -> (f64, Vec<f64>, Vec<f64>, Matrix, Vec<f64>) {
    let p = ph.dim();
    let t = ph.t();
    let exit = ph.exit();
    let pi = ph.pi();
    let ey = expm(&(t * y)).unwrap();
    let f = (pi * &ey * exit)[0];
    let tail = &ey * exit;
    let b = (0..p).map(|k| pi[k] * tail[k]).collect();
    let head = pi * &ey;
    let ex = (0..p).map(|k| head[k] * exit[k]).collect();
    let mut z = vec![0.0; p];
    let mut n = Matrix::zeros(p, p);
    for k in 0..p {
        for l in 0..p {
            let g = |u: f64| {
                let a = pi * expm(&(t * u)).unwrap();
                let c = expm(&(t * (y - u))).unwrap() * exit;
                a[k] * c[l]
            };
            let (v, _) = quad::integrate(g, 0.0, y, 1e-14, 1e-11);
            if k == l {
                z[k] = v;
            } else {
                n[(k, l)] = t[(k, l)] * v;
            }
        }
    }
    (f, b, z, n, ex)
}

/// Per-observation statistics for an exact CPH point by integrating the PH
/// oracle over the posterior of Θ.
fn cph_exact_oracle(ph: &PhParams, mix: &MixingFamily, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let p = ph.dim();
    let g = |theta: f64| mix.density(theta).unwrap() * theta;
    // Components: 0 = f, then B, Z, N (row-major), exit, log θ.
    let width = 2 + 3 * p + p * p;
    let part = |c: usize| {
        integrate_log(
            |theta| {
                let (f, b, z, n, e) = ph_exact_oracle(ph, theta * x);
                let w = g(theta);
                w * match c {
                    0 => f,
                    c if c <= p => b[c - 1],
                    c if c <= 2 * p => z[c - 1 - p],
                    c if c <= 2 * p + p * p => {
                        let i = c - 1 - 2 * p;
                        n[(i / p, i % p)]
                    }
                    c if c <= 3 * p + p * p => e[c - 1 - 2 * p - p * p],
                    _ => f * theta.ln(),
                }
            },
            (1e-8f64).ln(),
            200f64.ln(),
        )
    };
    let vals: Vec<f64> = (0..width).map(part).collect();
    let f = vals[0];
    let sl = |a: usize, b: usize| vals[a..b].iter().map(|v| v / f).collect::<Vec<_>>();
    let mut n = sl(1 + 2 * p, 1 + 2 * p + p * p);
    // Oracle N is row-major; nalgebra iterates column-major.
    let nm = Matrix::from_row_slice(p, p, &n);
    n = nm.iter().copied().collect();
    (sl(1, 1 + p), sl(1 + p, 1 + 2 * p), n, sl(1 + 2 * p + p * p, 1 + 3 * p + p * p), vals[width - 1] / f)
}

#[test]
fn exact_point_matches_nested_quadrature() {
    let mix = MixingFamily::gamma(1.7).unwrap();
    for ph in [coxian2(), general2()] {
        let model = CphModel::new(ph.clone(), mix.clone());
        for x in [0.3, 2.5] {
            let (b, z, n, e, elog) = cph_exact_oracle(&ph, &mix, x);
            for opts in [DENSE, SPECTRAL] {
                let s = estep(&model, &[Observation::Exact(x)], None, opts).unwrap();
                let (sb, sz, sn, se) = per_obs(&s);
                assert!(max_rel(&sb, &b) < 1e-7, "{sb:?} {b:?}");
                assert!(max_rel(&sz, &z) < 1e-7, "{sz:?} {z:?}");
                assert!(max_rel(&sn, &n) < 1e-7, "{sn:?} {n:?}");
                assert!(max_rel(&se, &e) < 1e-7, "{se:?} {e:?}");
                assert!((mean_log_theta(&s) - elog).abs() < 1e-7, "{} {elog}", mean_log_theta(&s));
                assert!((s.loglik - model.pdf(x).unwrap().ln()).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn degenerate_scaling_reduces_to_classical_ph() {
    // α = 1 puts all mass at θ = η, so X = Y/η.
    let eta = 1.3;
    let mix = MixingFamily::stable(1.0, eta).unwrap();
    let ph = general2();
    let model = CphModel::new(ph.clone(), mix);
    let x = 1.1;
    let (f, b, z, n, e) = ph_exact_oracle(&ph, eta * x);
    let s = estep(&model, &[Observation::Exact(x)], None, QUAD_DENSE).unwrap();
    let (sb, sz, sn, se) = per_obs(&s);
    let nv: Vec<f64> = n.iter().map(|v| v / f).collect();
    assert!(max_rel(&sb, &b.iter().map(|v| v / f).collect::<Vec<_>>()) < 1e-9);
    assert!(max_rel(&sz, &z.iter().map(|v| v / f).collect::<Vec<_>>()) < 1e-9);
    assert!(max_rel(&sn, &nv) < 1e-9);
    assert!(max_rel(&se, &e.iter().map(|v| v / f).collect::<Vec<_>>()) < 1e-9);
    assert!((s.loglik - (eta * f).ln()).abs() < 1e-12);
    let s2 = estep(&model, &[Observation::Exact(x)], None, QUAD_SPECTRAL).unwrap();
    assert_stats_close(&s, &s2, 1e-10);
}

#[test]
fn p1_exponential_statistics() {
    // One state: B = exit = 1 and Θ·Z = Y = Θx.
    let model = gamma_model(PhParams::from_parts(&[1.0], &[-2.0]).unwrap(), 2.5, 100);
    let x = 0.8;
    let s = estep(&model, &[Observation::Exact(x)], None, DENSE).unwrap();
    assert!((s.b[0] - 1.0).abs() < 1e-14);
    assert!((s.exit[0] - 1.0).abs() < 1e-14);
    // Posterior of Θ is Gamma(α+1, 1 + 2x).
    let post_mean = 3.5 / (1.0 + 2.0 * x);
    assert!((s.tz[0] - post_mean * x).abs() < 1e-12, "{}", s.tz[0]);
    assert!((mean_log_theta(&s) - (digamma(3.5) - (1.0 + 2.0 * x).ln())).abs() < 1e-12);
}

struct Path {
    y: f64,
    start: usize,
    occ: Vec<f64>,
    jumps: Matrix,
    last: usize,
}

fn simulate_path<R: Rng>(ph: &PhParams, rng: &mut R) -> Path {
    let p = ph.dim();
    let t = ph.t();
    let exit = ph.exit();
    let u: f64 = rng.random();
    let mut state = 0;
    let mut acc = 0.0;
    for k in 0..p {
        acc += ph.pi()[k];
        if u < acc {
            state = k;
            break;
        }
    }
    let start = state;
    let mut occ = vec![0.0; p];
    let mut jumps = Matrix::zeros(p, p);
    loop {
        let rate = -t[(state, state)];
        let h = Exp::new(rate).unwrap().sample(rng);
        occ[state] += h;
        let r: f64 = rng.random::<f64>() * rate;
        if r < exit[state] {
            return Path { y: occ.iter().sum(), start, occ, jumps, last: state };
        }
        let mut acc = exit[state];
        let mut next = state;
        for l in 0..p {
            if l != state {
                acc += t[(state, l)];
                if r < acc {
                    next = l;
                    break;
                }
            }
        }
        if next == state {
            // Rounding at the top of the cumulative sum.
            next = (0..p).rev().find(|&l| l != state && t[(state, l)] > 0.0).unwrap();
        }
        jumps[(state, next)] += 1.0;
        state = next;
    }
}

#[test]
fn censored_statistics_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let alpha = 1.4;
    let mix = MixingFamily::gamma(alpha).unwrap();
    for (ph, obs) in [
        (coxian2(), Observation::Interval(0.5, 2.0)),
        (general2(), Observation::RightCensored(1.5)),
    ] {
        let model = CphModel::new(ph.clone(), mix.clone());
        let (v, w) = obs.bounds().unwrap();
        let p = ph.dim();
        let mut hits = 0.0;
        let mut b = vec![0.0; p];
        let mut z = vec![0.0; p];
        let mut n = Matrix::zeros(p, p);
        let mut e = vec![0.0; p];
        let mut lt = 0.0;
        let draws = 400_000;
        for _ in 0..draws {
            let path = simulate_path(&ph, &mut rng);
            let theta = mix.sample(&mut rng);
            let x = path.y / theta;
            if x > v && x <= w {
                hits += 1.0;
                b[path.start] += 1.0;
                e[path.last] += 1.0;
                for k in 0..p {
                    z[k] += path.occ[k];
                }
                n += &path.jumps;
                lt += theta.ln();
            }
        }
        let prob = model.survival(v).unwrap() - if w.is_finite() { model.survival(w).unwrap() } else { 0.0 };
        let se = (prob * (1.0 - prob) / draws as f64).sqrt();
        assert!((hits / draws as f64 - prob).abs() < 5.0 * se);
        for opts in [DENSE, SPECTRAL, QUAD_DENSE, QUAD_SPECTRAL] {
            let s = estep(&model, &[obs], None, opts).unwrap();
            let (sb, sz, sn, sx) = per_obs(&s);
            // Loose bounds: about four Monte Carlo standard errors.
            for k in 0..p {
                assert!((sb[k] - b[k] / hits).abs() < 0.01, "{opts:?} b{k}: {} vs {}", sb[k], b[k] / hits);
                assert!((sx[k] - e[k] / hits).abs() < 0.01, "{opts:?} exit{k}");
                let zk = z[k] / hits;
                assert!((sz[k] - zk).abs() < 0.02 * zk.max(0.2), "{opts:?} z{k}: {} vs {zk}", sz[k]);
                for l in 0..p {
                    let nkl = n[(k, l)] / hits;
                    assert!((sn[k + l * p] - nkl).abs() < 0.02 * nkl.max(0.2), "{opts:?} n{k}{l}");
                }
            }
            assert!((mean_log_theta(&s) - lt / hits).abs() < 0.01, "{opts:?} log θ");
            // Quadrature rules leave 2e-8 of the prior mass uncovered.
            let tol = if opts.closed_form { 1e-10 } else { 1e-7 };
            assert!((s.loglik - prob.ln()).abs() < tol, "{opts:?}: {} vs {}", s.loglik, prob.ln());
        }
    }
}

#[test]
fn whole_line_interval_gives_prior_expectations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ph = random_general(&mut rng, 3);
    let green = ph.sub().green();
    let occ = ph.pi() * &green;
    for (mix, routes) in [
        (MixingFamily::gamma(0.8).unwrap(), vec![DENSE, SPECTRAL, QUAD_DENSE, QUAD_SPECTRAL]),
        (MixingFamily::stable(0.6, 1.0).unwrap(), vec![QUAD_DENSE, QUAD_SPECTRAL]),
    ] {
        let model = CphModel::new(ph.clone(), mix.clone());
        for opts in routes {
            let s = estep(&model, &[Observation::Interval(0.0, f64::INFINITY)], None, opts).unwrap();
            let tol = if opts.closed_form && matches!(mix, MixingFamily::Gamma { .. }) { 1e-12 } else { 1e-7 };
            assert!(s.loglik.abs() < tol, "{opts:?}: {}", s.loglik);
            for k in 0..3 {
                assert!((s.b[k] - ph.pi()[k]).abs() < 1e-9);
                assert!((s.tz[k] - occ[k]).abs() < 1e-8 * occ[k].max(1.0), "{opts:?} {} {}", s.tz[k], occ[k]);
                assert!((s.exit[k] - occ[k] * ph.exit()[k]).abs() < 1e-8);
                for l in 0..3 {
                    let want = if k == l { 0.0 } else { occ[k] * ph.t()[(k, l)] };
                    assert!((s.n[(k, l)] - want).abs() < 1e-8, "{opts:?} n{k}{l}");
                }
            }
            if let MixingFamily::Gamma { alpha } = mix {
                assert!((mean_log_theta(&s) - digamma(alpha)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shrinking_interval_approaches_exact_point() {
    let model = gamma_model(general2(), 2.2, 100);
    let x = 1.3;
    for opts in [DENSE, SPECTRAL, QUAD_DENSE, QUAD_SPECTRAL] {
        let exact = estep(&model, &[Observation::Exact(x)], None, opts).unwrap();
        let h = 1e-6;
        let near = estep(&model, &[Observation::Interval(x - h, x + h)], None, opts).unwrap();
        let (a, b, c, d) = per_obs(&exact);
        let (e, f, g, k) = per_obs(&near);
        assert!(max_rel(&a, &e) < 1e-6 && max_rel(&b, &f) < 1e-6, "{opts:?}");
        assert!(max_rel(&c, &g) < 1e-6 && max_rel(&d, &k) < 1e-6, "{opts:?}");
        assert!((near.loglik - (exact.loglik + (2.0 * h).ln())).abs() < 1e-6);
    }
}

#[test]
fn routes_agree_on_mixed_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ph = random_general(&mut rng, 4);
    let data: Vec<Observation> = (0..60)
        .map(|i| {
            let x = 0.05 + 0.2 * i as f64;
            match i % 3 {
                0 => Observation::Exact(x),
                1 => Observation::Interval(x, 1.5 * x),
                _ => Observation::RightCensored(x),
            }
        })
        .collect();
    let model = gamma_model(ph.clone(), 1.3, 200);
    let dense = estep(&model, &data, None, DENSE).unwrap();
    assert_stats_close(&dense, &estep(&model, &data, None, SPECTRAL).unwrap(), 1e-9);
    assert_stats_close(&dense, &estep(&model, &data, None, QUAD_DENSE).unwrap(), 1e-6);
    assert_stats_close(&dense, &estep(&model, &data, None, QUAD_SPECTRAL).unwrap(), 1e-6);
    let stable = CphModel::with_nodes(ph, MixingFamily::stable(0.7, 1.0).unwrap(), 200).unwrap();
    let a = estep(&stable, &data, None, QUAD_DENSE).unwrap();
    let b = estep(&stable, &data, None, QUAD_SPECTRAL).unwrap();
    assert_stats_close(&a, &b, 1e-9);
}

#[test]
fn estep_loglik_matches_direct_evaluation() {
    let model = gamma_model(coxian2(), 0.9, 100);
    let data =
        [Observation::Exact(0.4), Observation::Interval(0.0, 1.0), Observation::RightCensored(3.0), Observation::Exact(7.0)];
    let direct = loglik(&model, &data).unwrap();
    for opts in [DENSE, SPECTRAL] {
        assert!((estep(&model, &data, None, opts).unwrap().loglik - direct).abs() < 1e-10);
    }
    let weights = [1.0, 2.0, 0.0, 0.5];
    let s = estep(&model, &data, Some(&weights), DENSE).unwrap();
    assert!((s.m - 3.5).abs() < 1e-15);
    let want: f64 = data.iter().zip(&weights).map(|(o, w)| w * loglik(&model, &[*o]).unwrap()).sum();
    assert!((s.loglik - want).abs() < 1e-10);
}

#[test]
fn underflow_is_reported_with_index() {
    let ph = PhParams::from_parts(&[1.0], &[-1.0]).unwrap();
    let model = CphModel::new(ph, MixingFamily::stable(1.0, 1.0).unwrap());
    let data = [Observation::Exact(1.0), Observation::Exact(800.0)];
    for opts in [QUAD_DENSE, QUAD_SPECTRAL] {
        match estep(&model, &data, None, opts) {
            Err(Error::Underflow { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }
    let report = loglik_report(&model, &data).unwrap();
    assert_eq!(report.zero, vec![1]);
    assert_eq!(report.value, f64::NEG_INFINITY);
    // The starting model is scaled to the median, so the outlier must be far out.
    let mut config = EmConfig::new(1, StructureKind::General, MixingFamily::stable(1.0, 1.0).unwrap());
    config.max_iter = 5;
    let data = [Observation::Exact(1.0), Observation::Exact(1.0), Observation::Exact(1e5)];
    match fit(&data, &config) {
        Err(Error::AtIteration { iteration: 0, source }) => assert!(matches!(*source, Error::Underflow { .. })),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_observations_are_rejected() {
    let model = gamma_model(coxian2(), 1.0, 100);
    for bad in [
        Observation::Exact(0.0),
        Observation::Exact(f64::NAN),
        Observation::Interval(2.0, 1.0),
        Observation::Interval(-1.0, 1.0),
        Observation::RightCensored(f64::INFINITY),
    ] {
        assert!(matches!(estep(&model, &[bad], None, DENSE), Err(Error::InvalidInput(_))), "{bad}");
    }
    assert!(matches!(estep(&model, &[], None, DENSE), Err(Error::InvalidInput(_))));
    assert!(estep(&model, &[Observation::Exact(1.0)], Some(&[-1.0]), DENSE).is_err());
}

#[test]
fn lomax_loglik_examples() {
    let model = gamma_model(PhParams::from_parts(&[1.0], &[-1.0]).unwrap(), 2.0, 100);
    assert!((loglik(&model, &[Observation::Exact(1.0)]).unwrap() - 0.25f64.ln()).abs() < 1e-14);
    assert!((loglik(&model, &[Observation::RightCensored(1.0)]).unwrap() - 0.25f64.ln()).abs() < 1e-14);
    // F(1) − F(0) = 3/4.
    assert!((loglik(&model, &[Observation::Interval(0.0, 1.0)]).unwrap() - 0.75f64.ln()).abs() < 1e-14);
    let data = sample_data(&model, 100, 8);
    let direct: f64 = data.iter().map(|o| model.pdf(o.value()).unwrap().ln()).sum();
    assert!((loglik(&model, &data).unwrap() - direct).abs() < 1e-10);
}

#[test]
fn mstep_single_path_and_start_ratio() {
    // One exponential path observed at x: the rate MLE is 1/x.
    let x = 2.5;
    let s = EmStats {
        b: DVector::from_vec(vec![1.0]),
        tz: DVector::from_vec(vec![x]),
        n: Matrix::zeros(1, 1),
        exit: DVector::from_vec(vec![1.0]),
        mix: MixingStats::None,
        m: 1.0,
        loglik: 0.0,
    };
    let prev = CphModel::new(PhParams::from_parts(&[1.0], &[-1.0]).unwrap(), MixingFamily::stable(1.0, 1.0).unwrap());
    let out = mstep(&s, &prev, StructureKind::General).unwrap();
    assert!((out.ph.t()[(0, 0)] + 1.0 / x).abs() < 1e-15);
    assert_eq!(out.ph.pi()[0], 1.0);

    let mut s = hand_stats();
    s.b = DVector::from_vec(vec![2.0, 1.0]);
    s.m = 3.0;
    let out = mstep(&s, &gamma_model(general2(), 1.0, 100), StructureKind::General).unwrap();
    assert!((out.ph.pi()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((out.ph.pi()[1] - 1.0 / 3.0).abs() < 1e-15);
}

fn hand_stats() -> EmStats {
    EmStats {
        b: DVector::from_vec(vec![3.0, 1.0]),
        tz: DVector::from_vec(vec![2.0, 4.0]),
        n: Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]),
        exit: DVector::from_vec(vec![3.0, 1.5]),
        mix: MixingStats::LogMoment { mass: 4.0, log_sum: 4.0 * digamma(2.0) },
        m: 4.0,
        loglik: 0.0,
    }
}

#[test]
fn mstep_closed_form_updates() {
    let prev = gamma_model(general2(), 1.0, 100);
    let out = mstep(&hand_stats(), &prev, StructureKind::General).unwrap();
    let t = out.ph.t();
    let want = [[-2.0, 0.5], [0.125, -0.5]];
    for k in 0..2 {
        for l in 0..2 {
            assert!((t[(k, l)] - want[k][l]).abs() < 1e-15);
        }
    }
    assert!((out.ph.pi()[0] - 0.75).abs() < 1e-15);
    assert!((out.mixing.alpha().unwrap() - 2.0).abs() < 1e-9);
    assert!(out.frozen.is_empty());

    // The Coxian pattern drops the backward rate and its share of the diagonal.
    let cox = mstep(&hand_stats(), &prev, StructureKind::Coxian).unwrap();
    assert_eq!(cox.ph.t()[(1, 0)], 0.0);
    assert!((cox.ph.t()[(1, 1)] + 0.375).abs() < 1e-15);

    let mut idle = hand_stats();
    idle.tz[0] = 0.0;
    let out = mstep(&idle, &prev, StructureKind::General).unwrap();
    assert_eq!(out.frozen, vec![0]);
    assert_eq!(out.ph.t().row(0), prev.ph().t().row(0));
}

#[test]
fn mstep_rejects_empty_statistics() {
    let prev = gamma_model(general2(), 1.0, 100);
    let mut s = hand_stats();
    s.b.fill(0.0);
    assert!(matches!(mstep(&s, &prev, StructureKind::General), Err(Error::Estimation(_))));
}

fn sample_data(model: &CphModel, n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.sample_n(n, &mut rng).into_iter().map(Observation::Exact).collect()
}

#[test]
fn lomax_parameters_are_recovered() {
    // Exp(1)/Gamma(2) is Lomax with tail (1+x)^{-2}.
    let truth = gamma_model(PhParams::from_parts(&[1.0], &[-1.0]).unwrap(), 2.0, 100);
    let data = sample_data(&truth, 5000, 4);
    let mut config = EmConfig::new(1, StructureKind::General, MixingFamily::gamma(1.0).unwrap());
    config.tol = 1e-9;
    let report = fit(&data, &config).unwrap();
    assert!(report.converged);
    let alpha = report.model.mixing().alpha().unwrap();
    let rate = -report.model.ph().t()[(0, 0)];
    assert!((alpha - 2.0).abs() < 0.25, "α = {alpha}");
    assert!((rate - 1.0).abs() < 0.15, "rate = {rate}");
    assert!(report.loglik() >= loglik(&truth, &data).unwrap() - 0.01);
    let mut xs: Vec<f64> = data.iter().map(|o| o.value()).collect();
    let ks = ks_distance(&mut xs, |x| report.model.cdf(x).unwrap());
    assert!(ks < 0.02, "KS {ks}");
}

#[test]
fn em_trace_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = gamma_model(random_coxian(&mut rng, 3), 1.5, 100);
    let mut data = sample_data(&truth, 400, 13);
    for o in data.iter_mut().step_by(4) {
        *o = Observation::RightCensored(o.value());
    }
    let mut config = EmConfig::new(3, StructureKind::Coxian, MixingFamily::gamma(1.0).unwrap());
    config.max_iter = 150;
    let report = fit(&data, &config).unwrap();
    for w in report.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    // A fixed rule makes the quadrature route exact EM as well.
    let fixed = MixingFamily::Generic(GenericDensity::scaled_gamma(1.5, 1.5).unwrap());
    let mut config = EmConfig::new(2, StructureKind::General, fixed);
    config.max_iter = 60;
    let report = fit(&data, &config).unwrap();
    for w in report.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn fit_is_independent_of_thread_count() {
    let truth = gamma_model(general2(), 1.2, 100);
    let data = sample_data(&truth, 700, 21);
    let mut config = EmConfig::new(2, StructureKind::General, MixingFamily::gamma(1.0).unwrap());
    config.max_iter = 25;
    let runs: Vec<FitReport> = [1, 3, 8]
        .iter()
        .map(|&n| {
            config.threads = Some(n);
            fit(&data, &config).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.trace, runs[0].trace);
        assert_eq!(r.model.ph().t(), runs[0].model.ph().t());
        assert_eq!(r.model.ph().pi(), runs[0].model.ph().pi());
        assert_eq!(r.model.mixing().alpha(), runs[0].model.mixing().alpha());
    }
}

#[test]
fn coxian_fit_keeps_structure() {
    let truth = gamma_model(coxian2(), 2.0, 100);
    let data = sample_data(&truth, 300, 5);
    let mut config = EmConfig::new(3, StructureKind::Coxian, MixingFamily::gamma(1.0).unwrap());
    config.max_iter = 40;
    let report = fit(&data, &config).unwrap();
    assert!(StructureKind::Coxian.matches(report.model.ph().t()));
    assert_eq!(report.model.ph().pi()[0], 1.0);
    config.free_pi = true;
    let report = fit(&data, &config).unwrap();
    assert!(StructureKind::Coxian.matches(report.model.ph().t()));
}

#[test]
fn fit_density_recovers_exponential() {
    let mut config = EmConfig::new(1, StructureKind::General, MixingFamily::stable(1.0, 1.0).unwrap());
    config.tol = 1e-12;
    let h = |x: f64| (-x).exp();
    let report = fit_density(&h, (1e-8, 60.0), &config).unwrap();
    assert!((report.model.ph().t()[(0, 0)] + 1.0).abs() < 1e-6, "{}", report.model.ph().t());
    // The objective at the optimum is ∫ h log h = −1.
    assert!((report.loglik() + 1.0).abs() < 1e-6, "{}", report.loglik());
}

#[test]
fn fit_density_has_target_as_fixed_point() {
    let truth = gamma_model(PhParams::from_parts(&[1.0], &[-1.0]).unwrap(), 2.0, 100);
    let h = |x: f64| truth.pdf(x).unwrap();
    let mut config = EmConfig::new(1, StructureKind::General, MixingFamily::gamma(1.0).unwrap());
    config.tol = 1e-12;
    config.max_iter = 5000;
    let report = fit_density(&h, (1e-8, 1e7), &config).unwrap();
    assert!((report.model.mixing().alpha().unwrap() - 2.0).abs() < 1e-3);
    assert!((report.model.ph().t()[(0, 0)] + 1.0).abs() < 1e-3);
}

#[test]
fn fit_density_checks_target_mass() {
    let config = EmConfig::new(1, StructureKind::General, MixingFamily::gamma(1.0).unwrap());
    let h = |x: f64| 2.0 * (-x).exp();
    assert!(matches!(fit_density(&h, (1e-8, 60.0), &config), Err(Error::InvalidInput(_))));
    assert!(matches!(fit_density(&|_| 1.0, (0.0, 1.0), &config), Err(Error::InvalidInput(_))));
}

#[test]
fn panel_rule_is_exact_for_piecewise_linear_targets() {
    let tri = |x: f64| if x < 1.0 { x } else if x < 2.0 { 2.0 - x } else { 0.0 };
    let (xs, m) = panel_rule(&tri, &[0.0, 1.0, 2.0], 10).unwrap();
    assert_eq!(xs.len(), 10);
    assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    // The mean is 1 by symmetry.
    let mean: f64 = xs.iter().zip(&m).map(|(x, w)| x * w).sum();
    assert!((mean - 1.0).abs() < 1e-14);
    assert!(panel_rule(&tri, &[0.0, 1.0], 10).is_err(), "half the mass");
    assert!(panel_rule(&tri, &[1.0, 0.0], 10).is_err());
    assert!(panel_rule(&tri, &[0.0], 10).is_err());
}

#[test]
fn panel_fit_matches_the_log_rule_on_a_smooth_target() {
    let mut config = EmConfig::new(1, StructureKind::General, MixingFamily::stable(1.0, 1.0).unwrap());
    config.tol = 1e-12;
    let h = |x: f64| 2.0 * (-2.0 * x).exp();
    let edges: Vec<f64> = (0..=40).map(|i| i as f64).collect();
    let report = fit_density_panels(&h, &edges, &config).unwrap();
    assert!((report.model.ph().t()[(0, 0)] + 2.0).abs() < 1e-6, "{}", report.model.ph().t());
}

#[test]
fn config_validation() {
    let mut c = EmConfig::new(2, StructureKind::General, MixingFamily::gamma(1.0).unwrap());
    assert!(c.validate().is_ok());
    c.dim = 0;
    assert!(c.validate().is_err());
    c.dim = 2;
    c.tol = 0.0;
    assert!(c.validate().is_err());
    c.tol = 1e-8;
    c.threads = Some(0);
    assert!(c.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expected_flows_balance(seed in 0u64..10_000, alpha in 0.3f64..4.0, spectral in any::<bool>(), closed in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph = random_general(&mut rng, 3);
        let model = gamma_model(ph, alpha, 100);
        let data: Vec<Observation> = (0..12)
            .map(|i| {
                let x = rng.random_range(0.05..5.0);
                match i % 3 {
                    0 => Observation::Exact(x),
                    1 => Observation::Interval(x, x + rng.random_range(0.01..3.0)),
                    _ => Observation::RightCensored(x),
                }
            })
            .collect();
        let s = estep(&model, &data, None, EstepOptions { closed_form: closed, spectral }).unwrap();
        prop_assert!((s.b.sum() - s.m).abs() < 1e-9 * s.m);
        prop_assert!((s.exit.sum() - s.m).abs() < 1e-7 * s.m);
        for k in 0..3 {
            let inflow = s.b[k] + s.n.column(k).sum();
            let outflow = s.n.row(k).sum() + s.exit[k];
            prop_assert!((inflow - outflow).abs() < 1e-7 * s.m, "state {}: {} vs {}", k, inflow, outflow);
            prop_assert!(s.tz[k] >= 0.0 && s.n[(k, k)] == 0.0);
        }
    }
}

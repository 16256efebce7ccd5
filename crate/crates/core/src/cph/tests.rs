use super::*;
use crate::matfun;
use crate::special;
use crate::mixing::GenericDensity;
use crate::testutil::{exponential, integrate_log, ks_distance, random_coxian, random_general};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lomax(alpha: f64) -> CphModel {
    CphModel::new(exponential(1.0), MixingFamily::gamma(alpha).unwrap())
}

fn dutch() -> CphModel {
    let ph = PhParams::from_parts(
        &[1.0, 0.0, 0.0],
        &[-0.8620, 0.8079, 0.0, 0.0, -2.4341, 1.1014, 0.0, 0.0, -1.5808],
    )
    .unwrap();
    CphModel::with_nodes(ph, MixingFamily::gamma(1.3792).unwrap(), 200).unwrap()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

#[test]
fn lomax_cdf_and_pdf() {
    let m = lomax(2.0);
    assert!((m.cdf(1.0).unwrap() - 0.75).abs() < 1e-14);
    assert!((m.pdf(1.0).unwrap() - 0.25).abs() < 1e-14);
    for &x in &[0.01, 0.5, 3.0, 1e4] {
        assert!((m.survival(x).unwrap() - (1.0 + x).powf(-2.0)).abs() < 1e-13 * (1.0 + x).powf(-2.0).max(1e-3));
    }
}

#[test]
fn stable_half_scalar_survival() {
    let m = CphModel::new(exponential(1.0), MixingFamily::stable(0.5, 1.0).unwrap());
    assert!((m.survival(4.0).unwrap() - (-2f64).exp()).abs() < 1e-13);
}

#[test]
fn rejects_nonpositive_points() {
    let m = lomax(2.0);
    for &x in &[0.0, -1.0, f64::NAN] {
        assert!(matches!(m.cdf(x), Err(Error::Domain(_))));
        assert!(matches!(m.pdf(x), Err(Error::Domain(_))));
    }
    assert!(matches!(m.laplace(0.0), Err(Error::Domain(_))));
    assert!(matches!(m.quantile(1.0), Err(Error::Domain(_))));
    assert!(matches!(m.quantile(0.0), Err(Error::Domain(_))));
    assert_eq!(m.cdf(f64::INFINITY).unwrap(), 1.0);
}

#[test]
fn dutch_survival_two_ways() {
    let m = dutch();
    let closed = m.survival_by(1.0, Route::Transform).unwrap();
    let quad = m.survival_by(1.0, Route::Quadrature).unwrap();
    assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
    // Third opinion: integrate the PH survival against the Gamma density.
    let fam = m.mixing().clone();
    let direct = integrate_log(|t| fam.density(t).unwrap() * m.ph().survival(t).unwrap(), -40.0, 6.0);
    assert!((closed - direct).abs() < 1e-9, "{closed} vs {direct}");
}

#[test]
fn dutch_pdf_integrates_to_one() {
    let m = dutch();
    let mass = integrate_log(|x| m.pdf(x).unwrap(), -30.0, 80.0);
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
}

#[test]
fn random_gamma_density_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = CphModel::new(random_coxian(&mut rng, 3), MixingFamily::gamma(1.5).unwrap());
    let mass = integrate_log(|x| m.pdf(x).unwrap(), -30.0, 60.0);
    assert!((mass - 1.0).abs() < 1e-5, "{mass}");
}

#[test]
fn pdf_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let families = [MixingFamily::gamma(1.5).unwrap(), MixingFamily::stable(0.6, 1.3).unwrap()];
    for fam in families {
        let m = CphModel::new(random_general(&mut rng, 3), fam);
        for x in log_grid(0.05, 50.0, 25) {
            let h = 1e-4 * x;
            let fd = (m.cdf(x + h).unwrap() - m.cdf(x - h).unwrap()) / (2.0 * h);
            let f = m.pdf(x).unwrap();
            assert!((fd - f).abs() < 1e-6, "x={x}: {fd} vs {f}");
        }
    }
}

#[test]
fn laplace_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = CphModel::new(random_coxian(&mut rng, 3), MixingFamily::gamma(2.5).unwrap());
    assert!((m.laplace(1e-9).unwrap() - 1.0).abs() < 1e-6);
    let point = CphModel::new(exponential(1.0), MixingFamily::stable(1.0, 1.0).unwrap());
    assert!((point.laplace(1.0).unwrap() - 0.5).abs() < 1e-15);
    let mut prev = 1.0;
    for &s in &[0.01, 0.1, 1.0, 10.0] {
        let l = m.laplace(s).unwrap();
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn laplace_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = CphModel::new(random_general(&mut rng, 3), MixingFamily::gamma(1.7).unwrap());
    let n = 1_000_000;
    for &s in &[0.3, 2.0] {
        let mc = (0..n).map(|_| (-s * m.sample(&mut rng)).exp()).sum::<f64>() / n as f64;
        let l = m.laplace(s).unwrap();
        assert!((mc - l).abs() < 0.003, "s={s}: {mc} vs {l}");
    }
}

#[test]
fn moment_examples() {
    assert!((lomax(3.0).moment(1.0).unwrap().value().unwrap() - 0.5).abs() < 1e-14);
    assert!(lomax(1.3792).moment(2.0).unwrap().is_infinite());
    assert_eq!(lomax(0.5).moment(0.0).unwrap(), Moment::Finite(1.0));
    assert!(lomax(2.0).moment(-1.0).is_err());
}

#[test]
fn moment_matches_integrated_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fam in [MixingFamily::gamma(3.0).unwrap(), MixingFamily::stable(0.7, 0.8).unwrap()] {
        let m = CphModel::new(random_coxian(&mut rng, 3), fam);
        for &nu in &[0.5, 1.0, 2.0] {
            let want = integrate_log(|x| x.powf(nu) * m.pdf(x).unwrap(), -30.0, 60.0);
            let got = m.moment(nu).unwrap().value().unwrap();
            assert!((got / want - 1.0).abs() < 1e-4, "ν={nu}: {got} vs {want}");
        }
    }
}

#[test]
fn sample_mean_and_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 1_000_000;
    let m = lomax(3.0);
    let mean = m.sample_n(n, &mut rng).iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");

    let m = CphModel::new(random_coxian(&mut rng, 2), MixingFamily::gamma(1.5).unwrap());
    let mut xs = m.sample_n(n, &mut rng);
    let d = ks_distance(&mut xs, |x| m.cdf(x).unwrap());
    assert!(d < 0.005, "{d}");
}

#[test]
fn sampling_is_reproducible() {
    let m = CphModel::new(exponential(2.0), MixingFamily::stable(0.4, 1.0).unwrap());
    let a = m.sample_n(50, &mut ChaCha8Rng::seed_from_u64(9));
    let b = m.sample_n(50, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn quantile_examples() {
    assert!((lomax(2.0).quantile(0.75).unwrap() - 1.0).abs() < 1e-9);
    assert!((lomax(1.0).quantile(0.5).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn quantile_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let models = [
        CphModel::new(random_coxian(&mut rng, 3), MixingFamily::gamma(0.8).unwrap()),
        CphModel::new(random_general(&mut rng, 2), MixingFamily::stable(0.5, 1.0).unwrap()),
        lomax(1.3792),
    ];
    for m in &models {
        for i in 1..200 {
            let q = i as f64 / 200.0;
            let x = m.quantile(q).unwrap();
            let back = m.cdf(x).unwrap();
            assert!((back - q).abs() < 1e-9, "q={q}: {back}");
        }
        for &q in &[1e-6, 1.0 - 1e-6] {
            let x = m.quantile(q).unwrap();
            assert!((m.cdf(x).unwrap() - q).abs() < 1e-10);
        }
    }
}

#[test]
fn gamma_closed_form_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, alpha) in [0.6, 1.5, 3.0].into_iter().enumerate() {
        let ph = random_coxian(&mut rng, 2 + i);
        let m = CphModel::with_nodes(ph, MixingFamily::gamma(alpha).unwrap(), 200).unwrap();
        for x in log_grid(0.01, 100.0, 60) {
            let dc = (m.cdf_by(x, Route::Transform).unwrap() - m.cdf_by(x, Route::Quadrature).unwrap()).abs();
            let dp = (m.pdf_by(x, Route::Transform).unwrap() - m.pdf_by(x, Route::Quadrature).unwrap()).abs();
            assert!(dc < 1e-6 && dp < 1e-6, "α={alpha}, x={x}: {dc} {dp}");
        }
    }
}

#[test]
fn stable_tail_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for alpha in [0.3, 0.5, 0.8] {
        let m = CphModel::with_nodes(random_general(&mut rng, 3), MixingFamily::stable(alpha, 1.0).unwrap(), 200)
            .unwrap();
        let neg_t = -m.ph().t();
        for x in log_grid(0.01, 100.0, 30) {
            let p = matfun::matpow_real(&neg_t, alpha).unwrap() * (-x.powf(alpha));
            let want = (m.ph().pi() * matfun::expm(&p).unwrap()).sum();
            let closed = m.survival_by(x, Route::Transform).unwrap();
            let quad = m.survival_by(x, Route::Quadrature).unwrap();
            assert!((closed - want).abs() < 1e-12, "α={alpha}, x={x}");
            assert!((quad - want).abs() < 1e-5, "α={alpha}, x={x}: {quad} vs {want}");
        }
    }
}

#[test]
fn erlangization_recovers_phase_type() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let k = 1e4;
    for _ in 0..3 {
        let ph = random_general(&mut rng, 3);
        let fam = MixingFamily::Generic(GenericDensity::scaled_gamma(k, k).unwrap());
        let m = CphModel::new(ph.clone(), fam);
        let sup = log_grid(0.01, 50.0, 80)
            .into_iter()
            .map(|x| (m.cdf(x).unwrap() - ph.cdf(x).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 1e-2, "{sup}");
    }
}

#[test]
fn gamma_tail_approaches_breiman_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let alpha = 1.5;
    let m = CphModel::new(random_coxian(&mut rng, 2), MixingFamily::gamma(alpha).unwrap());
    let c = |x: f64| m.survival(x).unwrap() * x.powf(alpha);
    assert!((c(1e3) / c(1e4) - 1.0).abs() < 0.01);
    let limit = (m.ph().pi() * matfun::matpow_real(&-m.ph().t(), -alpha).unwrap()).sum();
    assert!((c(1e6) / limit - 1.0).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cdf_is_nondecreasing(seed in any::<u64>(), alpha in 0.3f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = CphModel::new(random_general(&mut rng, 3), MixingFamily::gamma(alpha).unwrap());
        let mut prev = 0.0;
        for x in log_grid(1e-3, 1e3, 50) {
            let f = m.cdf(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= prev - 1e-14);
            prev = f;
        }
    }

    #[test]
    fn moment_is_product_of_parts(seed in any::<u64>(), nu in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph = random_coxian(&mut rng, 2);
        let m = CphModel::new(ph.clone(), MixingFamily::gamma(2.0).unwrap());
        let want = special::gamma(2.0 - nu) * ph.moment(nu).unwrap();
        let got = m.moment(nu).unwrap().value().unwrap();
        prop_assert!((got / want - 1.0).abs() < 1e-12);
    }
}


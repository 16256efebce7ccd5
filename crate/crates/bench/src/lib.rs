//! Fixtures shared by the benchmarks.

use cph_core::{CphModel, MixingFamily, Observation, PhParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coxian model with `p` phases and rates in [0.2, 2].
pub fn coxian(p: usize, seed: u64) -> PhParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = vec![0.0; p * p];
    for i in 0..p {
        let exit = rng.random_range(0.2..2.0);
        let fwd = if i + 1 < p { rng.random_range(0.2..2.0) } else { 0.0 };
        if i + 1 < p {
            t[i * p + i + 1] = fwd;
        }
        t[i * p + i] = -(exit + fwd);
    }
    let mut pi = vec![0.0; p];
    pi[0] = 1.0;
    PhParams::from_parts(&pi, &t).expect("valid Coxian")
}

pub fn gamma_model(p: usize) -> CphModel {
    CphModel::new(coxian(p, 7), MixingFamily::gamma(1.5).expect("valid index"))
}

pub fn stable_model(p: usize) -> CphModel {
    CphModel::new(coxian(p, 7), MixingFamily::stable(0.7, 1.0).expect("valid index"))
}

/// `n` draws from `model`, every third right-censored at 80% of its value.
pub fn sample(model: &CphModel, n: usize, censor: bool) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    model
        .sample_n(n, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, x)| if censor && i % 3 == 0 { Observation::RightCensored(0.8 * x) } else { Observation::Exact(x) })
        .collect()
}

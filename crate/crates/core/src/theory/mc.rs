//! Monte-Carlo estimates of the success probabilities.
//!
//! Trials are grouped into fixed blocks of [`MC_BLOCK`]; block `b` draws from
//! substream `b` of the spec's seed. Blocks run in parallel and only integer
//! success counts are reduced, so the estimate does not depend on the number
//! of worker threads.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use super::{ecr_success_exact, tcr_success_exact, theorem_bounds, SimSpec, SuccessEstimate};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

pub const MC_BLOCK: u64 = 1 << 14;

fn count_successes(spec: &SimSpec, trial: impl Fn(&mut Rng) -> bool + Sync) -> Result<u64> {
    if spec.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let blocks = spec.trials.div_ceil(MC_BLOCK);
    Ok((0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(spec.seed, b);
            let len = MC_BLOCK.min(spec.trials - b * MC_BLOCK);
            (0..len).filter(|_| trial(&mut rng)).count() as u64
        })
        .sum())
}

fn estimate(successes: u64, spec: &SimSpec, exact: f64) -> Result<SuccessEstimate> {
    let est = successes as f64 / spec.trials as f64;
    Ok(SuccessEstimate {
        estimate: est,
        std_error: (est * (1.0 - est) / spec.trials as f64).sqrt(),
        exact: Some(exact),
        bounds: theorem_bounds(spec)?,
        trials: spec.trials,
    })
}

fn binomial(k: u64, r: f64) -> Binomial {
    Binomial::new(k, r).expect("probability already validated")
}

/// Simulates token-choice dispatch: uniform position `k` and class `i`, the
/// discriminative token routed correctly with probability `p_i`, and the
/// `k - 1` earlier irrelevant tokens each landing on expert `i` with
/// probability `1/n`.
pub fn tcr_success_mc(spec: &SimSpec) -> Result<SuccessEstimate> {
    spec.check_shape()?;
    let exact = tcr_success_exact(spec)?;
    let r = 1.0 / spec.n as f64;
    let successes = count_successes(spec, |rng| {
        let k = rng.random_range(1..=spec.s as u64);
        let i = rng.random_range(0..spec.n);
        let routed = rng.random::<f64>() < spec.p[i];
        let earlier = binomial(k - 1, r).sample(rng);
        routed && earlier < spec.capacity as u64
    })?;
    estimate(successes, spec, exact)
}

/// Simulates expert-choice dispatch: uniform class `i`, and the number of the
/// `s - 1` irrelevant tokens that outscore `o_i` drawn from
/// `Binomial(s - 1, q_i)`.
pub fn ecr_success_mc(spec: &SimSpec) -> Result<SuccessEstimate> {
    spec.check_shape()?;
    let exact = ecr_success_exact(spec)?;
    let successes = count_successes(spec, |rng| {
        let i = rng.random_range(0..spec.n);
        let outscoring = binomial(spec.s as u64 - 1, spec.q[i]).sample(rng);
        outscoring < spec.capacity as u64
    })?;
    estimate(successes, spec, exact)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: usize, n: usize, c: usize, p: f64, q: f64, trials: u64) -> SimSpec {
        SimSpec { s, n, capacity: c, p: vec![p; n], q: vec![q; n], trials, seed: 42 }
    }

    #[test]
    fn tcr_matches_exact() {
        let sp = spec(2, 2, 1, 0.5, 0.0, 1_000_000);
        let est = tcr_success_mc(&sp).unwrap();
        assert!((est.estimate - 0.375).abs() < 4.0 * est.std_error, "{est:?}");
        assert_eq!(est.exact, Some(0.375));
    }

    #[test]
    fn ecr_matches_exact() {
        let sp = spec(2, 2, 1, 0.5, 0.3, 1_000_000);
        let est = ecr_success_mc(&sp).unwrap();
        assert!((est.estimate - 0.7).abs() < 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn impossible_success() {
        assert_eq!(tcr_success_mc(&spec(30, 3, 2, 0.0, 0.0, 5000)).unwrap().estimate, 0.0);
        assert_eq!(ecr_success_mc(&spec(30, 3, 5, 0.5, 1.0, 5000)).unwrap().estimate, 0.0);
    }

    #[test]
    fn seeded_runs_repeat() {
        let sp = spec(64, 4, 8, 0.5, 0.1, 40_000);
        assert_eq!(tcr_success_mc(&sp).unwrap(), tcr_success_mc(&sp).unwrap());
        assert_eq!(ecr_success_mc(&sp).unwrap(), ecr_success_mc(&sp).unwrap());
        let other = SimSpec { seed: 43, ..sp.clone() };
        assert_ne!(tcr_success_mc(&sp).unwrap().estimate, tcr_success_mc(&other).unwrap().estimate);
    }

    #[test]
    fn estimate_is_independent_of_thread_count() {
        let sp = spec(64, 4, 8, 0.5, 0.1, 3 * MC_BLOCK + 17);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| tcr_success_mc(&sp).unwrap());
        let b = four.install(|| tcr_success_mc(&sp).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(tcr_success_mc(&spec(4, 2, 1, 0.5, 0.0, 0)).is_err());
        assert!(ecr_success_mc(&spec(4, 2, 1, 0.5, 0.0, 0)).is_err());
    }
}

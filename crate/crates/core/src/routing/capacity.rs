//! Expert capacity lower bound and its per-batch adaptive estimate.
//!
//! With orthogonal gating and near-uniform token features the capacity an
//! expert needs is bounded below by
//!
//! ```text
//! C_min = (1/n) * exp(d * δ² / (2 - δ²))
//! ```
//!
//! where `δ` is the largest affinity observed. The adaptive estimator tracks
//! `δ` as an exponential moving average over batches and never reports more
//! capacity than the hybrid router actually keeps for the current batch.

use serde::{Deserialize, Serialize};

use super::route_hybrid;
use crate::error::{Error, Result};
use crate::gating::ScoreMatrix;

/// Largest `δ` fed to the bound; the formula is undefined at 1.
pub const DELTA_CEILING: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub c_min_real: f64,
    pub c_effective: usize,
    pub delta_max: f64,
    /// EMA of the per-batch maximum affinity; `None` before the first batch.
    pub history: Option<f64>,
}

impl CapacityEstimate {
    /// Estimator state before any batch has been observed.
    pub fn initial() -> Self {
        Self { c_min_real: 0.0, c_effective: 1, delta_max: 0.0, history: None }
    }
}

fn real_to_capacity(x: f64) -> usize {
    let c = x.ceil();
    if c >= usize::MAX as f64 {
        usize::MAX
    } else {
        (c as usize).max(1)
    }
}

/// Closed-form capacity lower bound for feature dimension `d`, `n` experts and
/// maximum affinity `delta_max` in `[0, 1)`.
pub fn capacity_lower_bound(d: usize, n: usize, delta_max: f64) -> Result<CapacityEstimate> {
    if d == 0 || n == 0 {
        return Err(Error::invalid(format!("need d >= 1 and n >= 1, got d={d}, n={n}")));
    }
    if !(0.0..1.0).contains(&delta_max) {
        return Err(Error::invalid(format!("delta_max must be in [0, 1), got {delta_max}")));
    }
    let d2 = delta_max * delta_max;
    let c_min_real = (d as f64 * d2 / (2.0 - d2)).exp() / n as f64;
    Ok(CapacityEstimate { c_min_real, c_effective: real_to_capacity(c_min_real), delta_max, history: None })
}

/// Updates the capacity estimate with one batch of scores.
///
/// The batch maximum affinity is clamped to `[0, DELTA_CEILING]` and folded
/// into the EMA (`alpha` weights the new batch; the first batch initializes
/// the average). The effective capacity is `ceil(C_min)` capped by the longest
/// hybrid prefix `ℓ*` for this batch, and never below 1.
pub fn adaptive_capacity(
    scores: &ScoreMatrix,
    d: usize,
    theta: f64,
    prev: &CapacityEstimate,
    ema_alpha: f64,
) -> Result<CapacityEstimate> {
    if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
        return Err(Error::invalid(format!("ema_alpha must be in (0, 1], got {ema_alpha}")));
    }
    let observed = scores.max().clamp(0.0, DELTA_CEILING);
    let ema = match prev.history {
        None => observed,
        Some(h) => ema_alpha * observed + (1.0 - ema_alpha) * h,
    };
    let bound = capacity_lower_bound(d, scores.n(), ema)?;
    let hybrid = route_hybrid(scores, scores.s(), theta)?;
    let longest = hybrid.ell_star.iter().copied().max().unwrap_or(1);
    Ok(CapacityEstimate {
        c_min_real: bound.c_min_real,
        c_effective: bound.c_effective.min(longest).max(1),
        delta_max: ema,
        history: Some(ema),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_gives_one_over_n() {
        let est = capacity_lower_bound(128, 4, 0.0).unwrap();
        assert_eq!(est.c_min_real, 0.25);
        assert_eq!(est.c_effective, 1);
    }

    #[test]
    fn reference_value() {
        // exp(16 * 0.25 / 1.75) / 4
        let est = capacity_lower_bound(16, 4, 0.5).unwrap();
        assert!((est.c_min_real - 2.458_176_769_617_437).abs() < 1e-12, "{}", est.c_min_real);
        assert_eq!(est.c_effective, 3);
        assert!(capacity_lower_bound(16, 4, 0.6).unwrap().c_min_real > est.c_min_real);
    }

    #[test]
    fn domain_is_enforced() {
        assert!(capacity_lower_bound(16, 4, 1.0).is_err());
        assert!(capacity_lower_bound(16, 4, -0.1).is_err());
        assert!(capacity_lower_bound(16, 4, f64::NAN).is_err());
        assert!(capacity_lower_bound(0, 4, 0.5).is_err());
    }

    #[test]
    fn huge_bounds_saturate() {
        let est = capacity_lower_bound(100_000, 2, 0.99).unwrap();
        assert!(est.c_min_real.is_infinite());
        assert_eq!(est.c_effective, usize::MAX);
    }

    #[test]
    fn strictly_increasing_on_grid() {
        let mut last = capacity_lower_bound(16, 4, 0.0).unwrap().c_min_real;
        for k in 1..100 {
            let cur = capacity_lower_bound(16, 4, k as f64 / 100.0).unwrap().c_min_real;
            assert!(cur > last);
            last = cur;
        }
    }

    fn batch_with_max(max: f64) -> ScoreMatrix {
        ScoreMatrix::from_rows(&[
            vec![max, 0.1, 0.0, -0.2],
            vec![0.2, max - 0.1, 0.1, 0.0],
            vec![0.0, 0.1, 0.3, 0.2],
            vec![0.1, 0.0, 0.0, 0.4],
            vec![0.3, 0.1, 0.2, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn first_batch_matches_closed_form_then_cap() {
        let scores = batch_with_max(0.5);
        let est = adaptive_capacity(&scores, 16, 0.7, &CapacityEstimate::initial(), 1.0).unwrap();
        let bound = capacity_lower_bound(16, 4, 0.5).unwrap();
        assert_eq!(est.c_min_real, bound.c_min_real);
        let longest = *route_hybrid(&scores, 5, 0.7).unwrap().ell_star.iter().max().unwrap();
        assert_eq!(est.c_effective, bound.c_effective.min(longest));
        assert_eq!(est.delta_max, 0.5);
    }

    #[test]
    fn ema_fixed_point_and_arithmetic() {
        let scores = batch_with_max(0.5);
        let first = adaptive_capacity(&scores, 16, 0.7, &CapacityEstimate::initial(), 1.0).unwrap();
        let second = adaptive_capacity(&scores, 16, 0.7, &first, 1.0).unwrap();
        assert_eq!(first, second);

        let a = adaptive_capacity(&batch_with_max(0.8), 16, 0.7, &CapacityEstimate::initial(), 0.5).unwrap();
        let b = adaptive_capacity(&batch_with_max(0.4), 16, 0.7, &a, 0.5).unwrap();
        assert!((b.delta_max - 0.6).abs() < 1e-15);
    }

    #[test]
    fn negative_and_saturated_affinity_are_clamped() {
        let neg = ScoreMatrix::from_rows(&[vec![-0.5, -0.7]]).unwrap();
        let est = adaptive_capacity(&neg, 4, 0.7, &CapacityEstimate::initial(), 1.0).unwrap();
        assert_eq!(est.delta_max, 0.0);
        let top = ScoreMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let est = adaptive_capacity(&top, 4, 0.7, &CapacityEstimate::initial(), 1.0).unwrap();
        assert_eq!(est.delta_max, DELTA_CEILING);
        assert!(est.c_effective >= 1);
        assert!(adaptive_capacity(&top, 4, 0.7, &est, 0.0).is_err());
    }
}

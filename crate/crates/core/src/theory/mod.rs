//! Training-success probabilities of token-choice and expert-choice routing.
//!
//! The data model: a sample holds `s` tokens, exactly one of which is a
//! class-discriminative pattern `o_i` (uniform position, uniform class `i`).
//! In token choice `o_i` reaches expert `i` with probability `p_i`, and every
//! irrelevant token lands on each expert with probability `1/n`; the sample
//! succeeds when fewer than `C` earlier tokens occupy expert `i`. In expert
//! choice each irrelevant token outscores `o_i` with probability `q_i`, and the
//! sample succeeds when at most `C - 1` of them do.

pub mod binomial;
mod mc;

pub use mc::{ecr_success_mc, tcr_success_mc, MC_BLOCK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest capacity for which the token-choice lower bound is proven.
pub const TCR_LOWER_MIN_CAPACITY: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub s: usize,
    pub n: usize,
    pub capacity: usize,
    /// True-positive dispatch probability per class.
    pub p: Vec<f64>,
    /// False-positive (outscoring) probability per class.
    pub q: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
}

impl SimSpec {
    /// Validated constructor: besides shapes it enforces `p_i >= 1/n`, the
    /// "no worse than uniform dispatch" assumption.
    pub fn new(s: usize, n: usize, capacity: usize, p: Vec<f64>, q: Vec<f64>, trials: u64, seed: u64) -> Result<Self> {
        let spec = Self { s, n, capacity, p, q, trials, seed };
        spec.check_shape()?;
        let floor = 1.0 / n as f64;
        if let Some(i) = spec.p.iter().position(|&v| v < floor - 1e-12) {
            return Err(Error::invalid(format!("p[{i}] = {} is below 1/n = {floor}", spec.p[i])));
        }
        Ok(spec)
    }

    /// Structural checks every computation relies on.
    pub fn check_shape(&self) -> Result<()> {
        if self.s == 0 || self.n == 0 || self.capacity == 0 {
            return Err(Error::invalid(format!(
                "s, n and C must all be >= 1 (s={}, n={}, C={})",
                self.s, self.n, self.capacity
            )));
        }
        if self.p.len() != self.n || self.q.len() != self.n {
            return Err(Error::Shape(format!(
                "p and q need {} entries, got {} and {}",
                self.n,
                self.p.len(),
                self.q.len()
            )));
        }
        for (name, v) in [("p", &self.p), ("q", &self.q)] {
            if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::invalid(format!("{name}[{i}] = {} is not a probability", v[i])));
            }
        }
        Ok(())
    }

    pub fn p_sum(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// A bound value together with whether its hypotheses hold for the spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBounds {
    /// `C Σp / (5s)`.
    pub tcr_lower: Bound,
    /// `10 C Σp / s`.
    pub tcr_upper: Bound,
    /// `(1/n) Σ exp(-(s-1) q_i / 8)`, valid when `C <= (s-1) q_i / 2 + 1` for all `i`.
    pub ecr_upper_tail: Bound,
    /// `1 - exp(-3C/16)`, valid when `C >= 2 (s-1) q_i` for all `i`.
    pub ecr_lower_tail: Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub exact: Option<f64>,
    pub bounds: TheoremBounds,
    pub trials: u64,
}

/// Exact token-choice success probability,
/// `(1/(ns)) Σ_i p_i Σ_{k=1}^{s} P(Binomial(k-1, 1/n) <= C-1)`.
pub fn tcr_success_exact(spec: &SimSpec) -> Result<f64> {
    spec.check_shape()?;
    let positions = binomial::cumulative_cdf_sum(spec.capacity as u64 - 1, spec.s as u64, 1.0 / spec.n as f64);
    Ok((spec.p_sum() * positions / (spec.n * spec.s) as f64).clamp(0.0, 1.0))
}

/// Exact expert-choice success probability,
/// `(1/n) Σ_i P(Binomial(s-1, q_i) <= C-1)`.
pub fn ecr_success_exact(spec: &SimSpec) -> Result<f64> {
    spec.check_shape()?;
    let m = spec.capacity as u64 - 1;
    let k = spec.s as u64 - 1;
    let total: f64 = spec.q.iter().map(|&q| binomial::cdf(m, k, q)).sum();
    Ok((total / spec.n as f64).clamp(0.0, 1.0))
}

/// The closed-form bounds on both success probabilities, each with a flag
/// telling whether its hypotheses hold.
///
/// The token-choice lower bound additionally needs the range of positions
/// `1 + nC/4 ..= 1 + nC/2` it sums over to fit inside the sample, i.e.
/// `s >= 1 + nC/2`; outside that range the bound can exceed the exact value.
pub fn theorem_bounds(spec: &SimSpec) -> Result<TheoremBounds> {
    spec.check_shape()?;
    let s = spec.s as f64;
    let c = spec.capacity as f64;
    let n = spec.n as f64;
    let p_sum = spec.p_sum();
    let spread = s - 1.0;
    let tcr_lower = Bound {
        value: c * p_sum / (5.0 * s),
        valid: spec.capacity >= TCR_LOWER_MIN_CAPACITY && s >= 1.0 + n * c / 2.0,
    };
    let tcr_upper = Bound { value: 10.0 * c * p_sum / s, valid: true };
    let ecr_upper_tail = Bound {
        value: spec.q.iter().map(|&q| (-spread * q / 8.0).exp()).sum::<f64>() / n,
        valid: spec.q.iter().all(|&q| c <= spread * q / 2.0 + 1.0),
    };
    let ecr_lower_tail = Bound {
        value: 1.0 - (-3.0 * c / 16.0).exp(),
        valid: spec.q.iter().all(|&q| c >= 2.0 * spread * q),
    };
    Ok(TheoremBounds { tcr_lower, tcr_upper, ecr_upper_tail, ecr_lower_tail })
}

/// Chernoff bounds for a sum of independent Bernoulli variables with mean
/// `expectation`: returns bounds on `P(X <= E - λ)` and `P(X >= E + λ)`.
pub fn chernoff_tails(expectation: f64, lambda: f64) -> Result<(f64, f64)> {
    if !(expectation >= 0.0) || !expectation.is_finite() {
        return Err(Error::invalid(format!("expectation must be finite and >= 0, got {expectation}")));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and > 0, got {lambda}")));
    }
    let lower = if expectation == 0.0 { 0.0 } else { (-lambda * lambda / (2.0 * expectation)).exp() };
    let upper = (-lambda * lambda / (2.0 * (expectation + lambda / 3.0))).exp();
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: usize, n: usize, c: usize, p: f64, q: f64) -> SimSpec {
        SimSpec { s, n, capacity: c, p: vec![p; n], q: vec![q; n], trials: 1, seed: 0 }
    }

    #[test]
    fn tcr_two_tokens() {
        // position 1 always fits; position 2 fits iff the other token went
        // elsewhere: (1/4) * 2 * 0.5 * (1 + 0.5) = 3/8
        assert!((tcr_success_exact(&spec(2, 2, 1, 0.5, 0.0)).unwrap() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn tcr_unbounded_capacity() {
        let sp = SimSpec { p: vec![0.3, 0.5, 1.0], ..spec(20, 3, 20, 0.0, 0.0) };
        assert!((tcr_success_exact(&sp).unwrap() - 1.8 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn ecr_examples() {
        assert!((ecr_success_exact(&spec(2, 2, 1, 0.5, 0.3)).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(ecr_success_exact(&spec(50, 4, 3, 0.5, 0.0)).unwrap(), 1.0);
        assert_eq!(ecr_success_exact(&spec(50, 4, 50, 0.5, 0.9)).unwrap(), 1.0);
        assert_eq!(ecr_success_exact(&spec(50, 4, 49, 0.5, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn bounds_examples() {
        let b = theorem_bounds(&spec(1024, 4, 48, 0.25, 0.0)).unwrap();
        assert!((b.tcr_lower.value - 0.009_375).abs() < 1e-15);
        assert!((b.tcr_upper.value - 0.468_75).abs() < 1e-15);
        assert!(b.tcr_lower.valid);

        let b = theorem_bounds(&spec(101, 4, 20, 0.25, 0.1)).unwrap();
        assert!(b.ecr_lower_tail.valid);
        assert!((b.ecr_lower_tail.value - (1.0 - (-3.75f64).exp())).abs() < 1e-15);
        assert!((b.ecr_lower_tail.value - 0.976_48).abs() < 1e-5);

        let b = theorem_bounds(&spec(2, 2, 1, 0.5, 0.3)).unwrap();
        assert!(!b.tcr_lower.valid);
    }

    #[test]
    fn tcr_lower_needs_room_for_its_positions() {
        // n C > 5 s: every position fits, success is Σp/n, below C Σp / (5s)
        let sp = spec(100, 8, 99, 1.0, 0.0);
        let exact = tcr_success_exact(&sp).unwrap();
        let b = theorem_bounds(&sp).unwrap();
        assert!(exact < b.tcr_lower.value);
        assert!(!b.tcr_lower.valid);
    }

    #[test]
    fn chernoff_examples() {
        let (lo, hi) = chernoff_tails(50.0, 10.0).unwrap();
        assert!((lo - (-1.0f64).exp()).abs() < 1e-15);
        assert!((hi - (-0.9375f64).exp()).abs() < 1e-15);
        assert!((lo - 0.367_88).abs() < 1e-5 && (hi - 0.391_60).abs() < 1e-5);
        assert!(binomial::cdf(40, 100, 0.5) <= lo);
        assert_eq!(chernoff_tails(0.0, 2.0).unwrap().0, 0.0);
        assert!(chernoff_tails(-1.0, 2.0).is_err());
        assert!(chernoff_tails(1.0, 0.0).is_err());
    }

    #[test]
    fn success_is_monotone_in_capacity() {
        let mut last = (0.0, 0.0);
        for c in 1..=40 {
            let sp = spec(40, 4, c, 0.6, 0.2);
            let cur = (tcr_success_exact(&sp).unwrap(), ecr_success_exact(&sp).unwrap());
            assert!(cur.0 >= last.0 && cur.1 >= last.1);
            last = cur;
        }
    }

    #[test]
    fn validated_constructor() {
        assert!(SimSpec::new(10, 4, 2, vec![0.1; 4], vec![0.5; 4], 10, 0).is_err());
        assert!(SimSpec::new(10, 4, 2, vec![0.25; 4], vec![1.5; 4], 10, 0).is_err());
        assert!(SimSpec::new(10, 4, 0, vec![0.25; 4], vec![0.5; 4], 10, 0).is_err());
        assert!(SimSpec::new(10, 4, 2, vec![0.25; 3], vec![0.5; 4], 10, 0).is_err());
        assert!(SimSpec::new(10, 4, 2, vec![0.25; 4], vec![0.5; 4], 10, 0).is_ok());
    }
}

//! Auxiliary load-balancing loss and node-locality loss.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::argmax;
use crate::routing::DispatchPlan;

/// Support smoothing applied to the localized distribution.
pub const LOCALITY_EPS: f64 = 1e-8;

/// Per-expert load of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Fraction of tokens whose highest gate probability is expert `i`.
    pub f: Vec<f64>,
    /// Mean gate probability mass on expert `i`.
    pub p: Vec<f64>,
    pub tokens: usize,
    /// Tokens actually dispatched to each expert by the plan.
    pub dispatched: Vec<usize>,
}

impl LoadStats {
    pub fn n(&self) -> usize {
        self.f.len()
    }
}

pub fn load_stats(gate_probs: ArrayView2<'_, f64>, plan: &DispatchPlan) -> Result<LoadStats> {
    let (s, n) = gate_probs.dim();
    if n != plan.n() {
        return Err(Error::Shape(format!("gate probabilities have {n} experts, plan has {}", plan.n())));
    }
    if s == 0 {
        return Err(Error::Empty);
    }
    let mut counts = vec![0usize; n];
    for row in gate_probs.outer_iter() {
        counts[argmax(row)] += 1;
    }
    let f = counts.iter().map(|&c| c as f64 / s as f64).collect();
    let p = (0..n).map(|i| gate_probs.column(i).sum() / s as f64).collect();
    let dispatched = plan.experts.iter().map(Vec::len).collect();
    Ok(LoadStats { f, p, tokens: s, dispatched })
}

/// `alpha * n * Σ f_i P_i`.
pub fn aux_loss(stats: &LoadStats, alpha: f64) -> f64 {
    let dot: f64 = stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum();
    alpha * stats.n() as f64 * dot
}

/// Realized traffic per node versus the fully localized target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDistribution {
    /// Fraction of dispatched token slots handled by each node.
    pub current: Vec<f64>,
    /// Target distribution when every token stays on its home node.
    pub localized: Vec<f64>,
    pub expert_to_node: Vec<usize>,
}

/// Places experts on `m` nodes in contiguous blocks.
pub fn contiguous_placement(n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|i| i * m / n).collect()
}

/// Home-node distribution of `s` tokens sharded contiguously over `m` nodes.
pub fn home_distribution(s: usize, m: usize) -> Vec<f64> {
    let mut counts = vec![0usize; m];
    for t in 0..s {
        counts[t * m / s] += 1;
    }
    counts.into_iter().map(|c| c as f64 / s as f64).collect()
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::invalid(format!("{what} has a negative or NaN entry")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl NodeDistribution {
    pub fn new(current: Vec<f64>, localized: Vec<f64>, expert_to_node: Vec<usize>) -> Result<Self> {
        if current.len() != localized.len() {
            return Err(Error::Shape("current and localized distributions differ in length".into()));
        }
        check_distribution(&current, "current distribution")?;
        check_distribution(&localized, "localized distribution")?;
        if expert_to_node.iter().any(|&j| j >= current.len()) {
            return Err(Error::invalid("expert placed on a node that does not exist"));
        }
        Ok(Self { current, localized, expert_to_node })
    }

    /// Builds `D_c` from the plan's dispatched token counts. A plan that
    /// dispatches nothing produces no traffic and is treated as localized.
    pub fn from_plan(plan: &DispatchPlan, expert_to_node: Vec<usize>, localized: Vec<f64>) -> Result<Self> {
        if expert_to_node.len() != plan.n() {
            return Err(Error::Shape(format!(
                "placement covers {} experts, plan has {}",
                expert_to_node.len(),
                plan.n()
            )));
        }
        let m = localized.len();
        let mut counts = vec![0usize; m];
        for (i, list) in plan.experts.iter().enumerate() {
            let node = *expert_to_node.get(i).filter(|&&j| j < m).ok_or_else(|| {
                Error::invalid(format!("expert {i} is not placed on one of the {m} nodes"))
            })?;
            counts[node] += list.len();
        }
        let total: usize = counts.iter().sum();
        let current = if total == 0 {
            localized.clone()
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self::new(current, localized, expert_to_node)
    }

    pub fn m(&self) -> usize {
        self.current.len()
    }
}

/// `mu * KL(D_c || D_l)` with `D_l` floored at `eps` and `0 ln 0 = 0`.
pub fn locality_loss(nd: &NodeDistribution, mu: f64, eps: f64) -> f64 {
    let kl: f64 = nd
        .current
        .iter()
        .zip(&nd.localized)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, l)| c * (c / l.max(eps)).ln())
        .sum();
    mu * kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RouteMode;
    use ndarray::array;
    use proptest::prelude::*;

    fn stats(f: Vec<f64>, p: Vec<f64>) -> LoadStats {
        let n = f.len();
        LoadStats { f, p, tokens: 1, dispatched: vec![0; n] }
    }

    fn plan(experts: Vec<Vec<usize>>) -> DispatchPlan {
        let ell_star = experts.iter().map(Vec::len).collect();
        DispatchPlan { mode: RouteMode::Tcr, capacity: 100, experts, dropped: vec![], ell_star }
    }

    #[test]
    fn aux_loss_examples() {
        assert!((aux_loss(&stats(vec![1.0, 0.0], vec![0.9, 0.1]), 0.01) - 0.018).abs() < 1e-12);
        assert!((aux_loss(&stats(vec![0.5, 0.5], vec![0.5, 0.5]), 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(aux_loss(&stats(vec![0.2, 0.8], vec![0.6, 0.4]), 0.0), 0.0);
    }

    #[test]
    fn locality_examples() {
        let same = NodeDistribution::new(vec![0.3, 0.7], vec![0.3, 0.7], vec![0, 1]).unwrap();
        assert!(locality_loss(&same, 1.0, LOCALITY_EPS).abs() < 1e-12);
        let skew = NodeDistribution::new(vec![0.75, 0.25], vec![0.5, 0.5], vec![0, 1]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((locality_loss(&skew, 1.0, LOCALITY_EPS) - expected).abs() < 1e-12);
        assert!((expected - 0.130_812).abs() < 1e-6);
        assert_eq!(locality_loss(&skew, 0.0, LOCALITY_EPS), 0.0);
    }

    #[test]
    fn locality_handles_empty_support() {
        let nd = NodeDistribution::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![0, 1]).unwrap();
        let loss = locality_loss(&nd, 1.0, LOCALITY_EPS);
        assert!(loss.is_finite() && loss > 0.0);
        let zero_current = NodeDistribution::new(vec![1.0, 0.0], vec![0.5, 0.5], vec![0, 1]).unwrap();
        assert!((locality_loss(&zero_current, 1.0, LOCALITY_EPS) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn load_stats_examples() {
        let unanimous = array![[0.7, 0.3], [0.9, 0.1], [0.6, 0.4], [0.8, 0.2]];
        let st = load_stats(unanimous.view(), &plan(vec![vec![], vec![]])).unwrap();
        assert_eq!(st.f, vec![1.0, 0.0]);

        let tied = array![[0.5, 0.5], [0.5, 0.5]];
        let st = load_stats(tied.view(), &plan(vec![vec![0], vec![1]])).unwrap();
        assert_eq!(st.p, vec![0.5, 0.5]);
        assert_eq!(st.f, vec![1.0, 0.0]);
        assert_eq!(st.dispatched, vec![1, 1]);

        let mixed = array![[0.6, 0.4], [0.3, 0.7], [0.1, 0.9]];
        let st = load_stats(mixed.view(), &plan(vec![vec![], vec![]])).unwrap();
        assert!((st.f[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((st.f[1] - 2.0 / 3.0).abs() < 1e-15);

        assert!(load_stats(mixed.view(), &plan(vec![vec![]])).is_err());
    }

    #[test]
    fn node_distribution_from_plan() {
        let p = plan(vec![vec![0, 1, 2], vec![3], vec![], vec![4, 5, 6, 7]]);
        let nd = NodeDistribution::from_plan(&p, contiguous_placement(4, 2), home_distribution(8, 2)).unwrap();
        assert_eq!(nd.current, vec![0.5, 0.5]);
        assert_eq!(nd.localized, vec![0.5, 0.5]);
        assert!(NodeDistribution::from_plan(&p, vec![0, 0, 0, 5], vec![0.5, 0.5]).is_err());
        assert!(NodeDistribution::new(vec![0.5, 0.6], vec![0.5, 0.5], vec![]).is_err());
    }

    #[test]
    fn pairing_extremes_by_brute_force() {
        // Over all pairings of fixed multisets, the anti-sorted pairing is the
        // minimum and the co-sorted pairing the maximum.
        let f = [0.1, 0.2, 0.3, 0.4];
        let p = [0.05, 0.15, 0.3, 0.5];
        let mut perms = vec![];
        permute(&mut [0, 1, 2, 3], 0, &mut perms);
        let values: Vec<f64> = perms
            .iter()
            .map(|perm| aux_loss(&stats(f.to_vec(), perm.iter().map(|&i| p[i]).collect()), 1.0))
            .collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let anti = aux_loss(&stats(f.to_vec(), vec![0.5, 0.3, 0.15, 0.05]), 1.0);
        let co = aux_loss(&stats(f.to_vec(), p.to_vec()), 1.0);
        assert!((min - anti).abs() < 1e-15);
        assert!((max - co).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn uniform_load_is_minimal_when_f_tracks_p(v in simplex(6)) {
            // n * Σ v_i^2 >= 1 with equality only at the uniform vector
            let loss = aux_loss(&stats(v.clone(), v), 1.0);
            prop_assert!(loss >= 1.0 - 1e-12);
        }
    }

    fn permute(v: &mut [usize], k: usize, out: &mut Vec<Vec<usize>>) {
        if k == v.len() {
            out.push(v.to_vec());
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect()
        })
    }

    proptest! {
        #[test]
        fn locality_is_nonnegative(c in simplex(5), l in simplex(5)) {
            let nd = NodeDistribution::new(c, l, vec![0; 5]).unwrap();
            prop_assert!(locality_loss(&nd, 1.0, LOCALITY_EPS) >= -1e-15);
        }

        #[test]
        fn losses_ignore_token_order(rows in prop::collection::vec(simplex(3), 2..12), rot in 0usize..12) {
            let s = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let rotated: Vec<f64> = (0..s).flat_map(|t| rows[(t + rot) % s].clone()).collect();
            let a = ndarray::Array2::from_shape_vec((s, 3), flat).unwrap();
            let b = ndarray::Array2::from_shape_vec((s, 3), rotated).unwrap();
            let pl = plan(vec![vec![], vec![], vec![]]);
            let sa = load_stats(a.view(), &pl).unwrap();
            let sb = load_stats(b.view(), &pl).unwrap();
            prop_assert!((aux_loss(&sa, 0.3) - aux_loss(&sb, 0.3)).abs() < 1e-12);
        }
    }
}

//! Token-choice, expert-choice and hybrid dispatch under a capacity bound.
//!
//! Ties are always broken towards the lower index, for experts within a token
//! row and for tokens within an expert column. "First-C" in token-choice mode
//! means the `C` smallest token indices, i.e. arrival order into the expert's
//! buffer.

mod capacity;

pub use capacity::{adaptive_capacity, capacity_lower_bound, CapacityEstimate, DELTA_CEILING};

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouteMode {
    #[serde(rename = "TCR")]
    Tcr,
    #[serde(rename = "ECR")]
    Ecr,
    #[serde(rename = "HYBRID")]
    Hybrid,
}

impl fmt::Display for RouteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteMode::Tcr => "TCR",
            RouteMode::Ecr => "ECR",
            RouteMode::Hybrid => "HYBRID",
        })
    }
}

/// Per-expert token lists produced by one routing pass.
///
/// `ell_star[i]` is the number of tokens expert `i` keeps. In hybrid mode it is
/// the thresholded prefix length; in the other modes it equals the list length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub mode: RouteMode,
    pub capacity: usize,
    pub experts: Vec<Vec<usize>>,
    /// `(token, intended expert)` pairs that were not processed.
    pub dropped: Vec<(usize, usize)>,
    pub ell_star: Vec<usize>,
}

impl DispatchPlan {
    pub fn n(&self) -> usize {
        self.experts.len()
    }

    /// Total number of (token, expert) slots processed.
    pub fn assigned(&self) -> usize {
        self.experts.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, token: usize, expert: usize) -> bool {
        self.experts.get(expert).is_some_and(|l| l.contains(&token))
    }

    /// Expert lists a token was dispatched to, in expert order.
    pub fn experts_of(&self, token: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.experts[i].contains(&token)).collect()
    }

    /// Checks the structural invariants for a batch of `s` tokens.
    pub fn validate(&self, s: usize) -> Result<()> {
        for (i, list) in self.experts.iter().enumerate() {
            if list.len() > self.capacity {
                return Err(Error::invalid(format!(
                    "expert {i} holds {} tokens, capacity is {}",
                    list.len(),
                    self.capacity
                )));
            }
            let mut seen = vec![false; s];
            for &t in list {
                if t >= s {
                    return Err(Error::invalid(format!("expert {i} lists token {t} but s = {s}")));
                }
                if std::mem::replace(&mut seen[t], true) {
                    return Err(Error::invalid(format!("expert {i} lists token {t} twice")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialization cannot fail")
    }
}

fn desc_then_index(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` highest values, highest first, lower index on ties.
fn top_k(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut indexed: Vec<(usize, f64)> = values.enumerate().collect();
    let k = k.min(indexed.len());
    if k == 0 {
        return Vec::new();
    }
    if k < indexed.len() {
        indexed.select_nth_unstable_by(k - 1, |&a, &b| desc_then_index(a, b));
        indexed.truncate(k);
    }
    indexed.sort_unstable_by(|&a, &b| desc_then_index(a, b));
    indexed.into_iter().map(|(i, _)| i).collect()
}

/// Token-choice routing: each token proposes its top-`ell` experts and every
/// expert keeps the `capacity` earliest candidates.
pub fn route_tcr(scores: &ScoreMatrix, ell: usize, capacity: usize) -> Result<DispatchPlan> {
    let n = scores.n();
    if ell == 0 || ell > n {
        return Err(Error::invalid(format!("ell must be in [1, {n}], got {ell}")));
    }
    if capacity == 0 {
        return Err(Error::invalid("capacity must be at least 1"));
    }
    let mut experts: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dropped = Vec::new();
    for t in 0..scores.s() {
        let candidates = if ell == 1 { vec![scores.argmax(t)] } else { top_k(scores.row(t).iter().copied(), ell) };
        for i in candidates {
            if experts[i].len() < capacity {
                experts[i].push(t);
            } else {
                dropped.push((t, i));
            }
        }
    }
    let ell_star = experts.iter().map(Vec::len).collect();
    Ok(DispatchPlan { mode: RouteMode::Tcr, capacity, experts, dropped, ell_star })
}

/// Expert-choice routing: each expert keeps its top-`capacity` tokens, highest
/// score first.
///
/// Tokens no expert selects are reported as dropped against their own top-1
/// expert.
pub fn route_ecr(scores: &ScoreMatrix, capacity: usize) -> Result<DispatchPlan> {
    if capacity == 0 {
        return Err(Error::invalid("capacity must be at least 1"));
    }
    let s = scores.s();
    let experts: Vec<Vec<usize>> =
        (0..scores.n()).map(|i| top_k(scores.column(i).iter().copied(), capacity)).collect();
    let mut picked = vec![false; s];
    experts.iter().flatten().for_each(|&t| picked[t] = true);
    let dropped = (0..s).filter(|&t| !picked[t]).map(|t| (t, scores.argmax(t))).collect();
    let ell_star = experts.iter().map(Vec::len).collect();
    Ok(DispatchPlan { mode: RouteMode::Ecr, capacity, experts, dropped, ell_star })
}

/// Length of the shortest prefix of `sorted` (descending, nonnegative) whose
/// sum reaches `theta` times the total.
fn threshold_prefix(sorted: &[f64], theta: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    if theta >= 1.0 {
        return sorted.len();
    }
    let total: f64 = sorted.iter().sum();
    let target = theta * total;
    let mut acc = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= target {
            return k + 1;
        }
    }
    sorted.len()
}

/// Hybrid routing: unbounded top-1 token choice, then every expert keeps the
/// shortest prefix of its tokens (by descending shifted score `(δ + 1) / 2`)
/// that carries at least `theta` of its score mass, capped at `cmax`.
///
/// Kept tokens are listed in arrival order, so with `theta = 1` and
/// `cmax >= s` the plan matches [`route_tcr`] with `ell = 1, C = s`.
pub fn route_hybrid(scores: &ScoreMatrix, cmax: usize, theta: f64) -> Result<DispatchPlan> {
    if cmax == 0 {
        return Err(Error::invalid("cmax must be at least 1"));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid(format!("theta must be in (0, 1], got {theta}")));
    }
    let stage1 = route_tcr(scores, 1, scores.s())?;
    let n = scores.n();
    let mut experts = Vec::with_capacity(n);
    let mut ell_star = Vec::with_capacity(n);
    let mut dropped = stage1.dropped;
    for (i, assigned) in stage1.experts.iter().enumerate() {
        let mut ranked: Vec<(usize, f64)> = assigned.iter().map(|&t| (t, (scores.get(t, i) + 1.0) / 2.0)).collect();
        ranked.sort_unstable_by(|&a, &b| desc_then_index(a, b));
        let sigma: Vec<f64> = ranked.iter().map(|&(_, v)| v).collect();
        let keep = threshold_prefix(&sigma, theta).min(cmax);
        let mut kept: Vec<usize> = ranked[..keep].iter().map(|&(t, _)| t).collect();
        kept.sort_unstable();
        dropped.extend(ranked[keep..].iter().map(|&(t, _)| (t, i)));
        ell_star.push(keep);
        experts.push(kept);
    }
    dropped.sort_unstable();
    Ok(DispatchPlan { mode: RouteMode::Hybrid, capacity: cmax, experts, dropped, ell_star })
}

//! Dispatch throughput over a grid of batch sizes, expert counts and
//! capacities. Each cell routes the same seeded isotropic batch `k` times and
//! reports the median wall time; allocation counts are deterministic and go
//! in the payload, timings do not.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use moelab::gating::{affinity_scores, grap_weights};
use moelab::routing::{route_ecr, route_hybrid, route_tcr};
use moelab::rng::derive_seed;
use moelab::synthetic::sample_isotropic;
use moelab::{DispatchPlan, ScoreMatrix};

use crate::alloc::allocations;
use crate::commands::route::Mode;
use crate::config::{resolve, Flags};
use crate::error::{CliError, CliResult};
use crate::report::RunReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub s: Vec<usize>,
    pub n: Vec<usize>,
    pub c: Vec<usize>,
    pub modes: Vec<Mode>,
    pub theta: f64,
    /// Features per expert; the token dimension is `n * group_width`.
    pub group_width: usize,
    /// Repetitions per cell; the median is reported.
    pub k: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            s: vec![1024, 4096],
            n: vec![8, 32],
            c: vec![64, 256],
            modes: vec![Mode::Tcr, Mode::Ecr, Mode::Hybrid],
            theta: 0.9,
            group_width: 8,
            k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub s: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub c: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub modes: Option<Vec<Mode>>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub group_width: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchArgs {
    pub fn resolve(&self) -> CliResult<BenchConfig> {
        let mut f = Flags::default();
        f.set("s", self.s.clone())
            .set("n", self.n.clone())
            .set("c", self.c.clone())
            .set("modes", self.modes.clone())
            .set("theta", self.theta)
            .set("group_width", self.group_width)
            .set("k", self.k)
            .set("seed", self.seed);
        resolve(self.config.as_deref(), f.into_map())
    }
}

fn dispatch(mode: Mode, scores: &ScoreMatrix, c: usize, theta: f64) -> moelab::Result<DispatchPlan> {
    match mode {
        Mode::Tcr => route_tcr(scores, 1, c),
        Mode::Ecr => route_ecr(scores, c),
        Mode::Hybrid => route_hybrid(scores, c, theta),
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn run(cfg: &BenchConfig) -> CliResult<RunReport> {
    if cfg.k == 0 {
        return Err(CliError::usage("k must be at least 1"));
    }
    if cfg.group_width == 0 {
        return Err(CliError::usage("group_width must be at least 1"));
    }
    let mut cells = Vec::new();
    let mut timings = Vec::new();
    for &s in &cfg.s {
        for &n in &cfg.n {
            let d = n * cfg.group_width;
            let batch = sample_isotropic(s, d, derive_seed(cfg.seed, (s as u64) << 32 | n as u64))?;
            let w = grap_weights(d, n)?;
            let scores = affinity_scores(&batch, w.view())?;
            for &c in &cfg.c {
                for &mode in &cfg.modes {
                    let plan = dispatch(mode, &scores, c, cfg.theta)?;
                    let mut nanos = Vec::with_capacity(cfg.k);
                    let mut allocs = u64::MAX;
                    for _ in 0..cfg.k {
                        let a0 = allocations();
                        let t0 = Instant::now();
                        let p = dispatch(mode, &scores, c, cfg.theta)?;
                        nanos.push(t0.elapsed().as_nanos());
                        allocs = allocs.min(allocations() - a0);
                        std::hint::black_box(p);
                    }
                    let med = median(nanos).max(1);
                    cells.push(json!({
                        "s": s, "n": n, "c": c, "mode": mode, "k": cfg.k,
                        "allocations": allocs,
                        "assigned": plan.assigned(),
                        "dropped": plan.dropped.len(),
                    }));
                    timings.push(json!({
                        "s": s, "n": n, "c": c, "mode": mode, "k": cfg.k,
                        "median_ns": med as u64,
                        "tokens_per_sec": s as f64 * 1e9 / med as f64,
                    }));
                }
            }
        }
    }
    let mut report = RunReport::new("bench", cfg.seed, serde_json::to_value(cfg).expect("config serializes"), json!({ "cells": cells }));
    report.timings = Some(json!({ "cells": timings }));
    Ok(report)
}

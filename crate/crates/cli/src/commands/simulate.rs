use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use moelab::theory::{
    ecr_success_exact, ecr_success_mc, tcr_success_exact, tcr_success_mc, theorem_bounds, SimSpec,
};

use crate::config::{parse_count, parse_count_usize, resolve, Flags};
use crate::error::CliResult;
use crate::report::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Router {
    Tcr,
    Ecr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Mc,
    Bounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub router: Router,
    pub method: Method,
    pub s: usize,
    pub n: usize,
    /// Expert capacity.
    pub c: usize,
    /// Per-expert true-positive rates; a single value is used for every expert.
    pub p: Vec<f64>,
    /// Per-expert false-positive rates; a single value is used for every expert.
    pub q: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            router: Router::Tcr,
            method: Method::Exact,
            s: 256,
            n: 4,
            c: 16,
            p: vec![1.0],
            q: vec![0.01],
            trials: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Router whose success rate is computed.
    #[arg(value_enum)]
    pub router: Option<Router>,
    #[arg(long, conflicts_with_all = ["mc", "bounds"])]
    pub exact: bool,
    #[arg(long, conflicts_with = "bounds")]
    pub mc: bool,
    #[arg(long)]
    pub bounds: bool,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = parse_count_usize)]
    pub c: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_count)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn resolve(&self) -> CliResult<SimulateConfig> {
        let method = match (self.exact, self.mc, self.bounds) {
            (true, _, _) => Some(Method::Exact),
            (_, true, _) => Some(Method::Mc),
            (_, _, true) => Some(Method::Bounds),
            _ => None,
        };
        let mut f = Flags::default();
        f.set("router", self.router)
            .set("method", method)
            .set("s", self.s)
            .set("n", self.n)
            .set("c", self.c)
            .set("p", self.p.clone())
            .set("q", self.q.clone())
            .set("trials", self.trials)
            .set("seed", self.seed);
        resolve(self.config.as_deref(), f.into_map())
    }
}

fn broadcast(v: &[f64], n: usize) -> Vec<f64> {
    if v.len() == 1 {
        vec![v[0]; n]
    } else {
        v.to_vec()
    }
}

pub fn run(cfg: &SimulateConfig) -> CliResult<RunReport> {
    let spec = SimSpec::new(cfg.s, cfg.n, cfg.c, broadcast(&cfg.p, cfg.n), broadcast(&cfg.q, cfg.n), cfg.trials, cfg.seed)?;
    let exact = match cfg.router {
        Router::Tcr => tcr_success_exact(&spec)?,
        Router::Ecr => ecr_success_exact(&spec)?,
    };
    let payload = match cfg.method {
        Method::Exact | Method::Bounds => json!({
            "router": cfg.router,
            "method": cfg.method,
            "exact": exact,
            "bounds": theorem_bounds(&spec)?,
        }),
        Method::Mc => {
            let est = match cfg.router {
                Router::Tcr => tcr_success_mc(&spec)?,
                Router::Ecr => ecr_success_mc(&spec)?,
            };
            json!({
                "router": cfg.router,
                "method": cfg.method,
                "estimate": est.estimate,
                "std_error": est.std_error,
                "exact": est.exact,
                "trials": est.trials,
                "bounds": est.bounds,
            })
        }
    };
    Ok(RunReport::new("simulate", cfg.seed, serde_json::to_value(cfg).expect("config serializes"), payload))
}

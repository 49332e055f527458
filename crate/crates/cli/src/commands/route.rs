use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use moelab::gating::{affinity_scores, gate_probabilities, grap_weights, io};
use moelab::losses::{
    aux_loss, contiguous_placement, home_distribution, load_stats, locality_loss, NodeDistribution, LOCALITY_EPS,
};
use moelab::routing::{route_ecr, route_hybrid, route_tcr};
use moelab::ScoreMatrix;

use crate::config::{parse_count_usize, resolve, Flags};
use crate::error::{CliError, CliResult};
use crate::report::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tcr,
    Ecr,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Rows are token features, scored against GrAP gating weights.
    Tokens,
    /// Rows are affinity scores, one column per expert.
    Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub input: PathBuf,
    pub input_kind: InputKind,
    pub mode: Mode,
    /// Expert count for token input; must divide the feature dimension.
    /// Defaults to the feature dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub ell: usize,
    /// Capacity for TCR and ECR; defaults to the token count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    /// Per-expert cap for hybrid routing; defaults to the token count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cmax: Option<usize>,
    pub theta: f64,
    pub alpha: f64,
    pub mu: f64,
    pub nodes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            input_kind: InputKind::Tokens,
            mode: Mode::Tcr,
            n: None,
            ell: 1,
            c: None,
            cmax: None,
            theta: 1.0,
            alpha: 0.01,
            mu: 0.01,
            nodes: 1,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    /// Token (or score) file: CSV, or `.bin` for the binary format.
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub input_kind: Option<InputKind>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ell: Option<usize>,
    #[arg(long, value_parser = parse_count_usize)]
    pub c: Option<usize>,
    #[arg(long, value_parser = parse_count_usize)]
    pub cmax: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RouteArgs {
    pub fn resolve(&self) -> CliResult<RouteConfig> {
        let mut f = Flags::default();
        f.set("input", self.input.clone())
            .set("input_kind", self.input_kind)
            .set("mode", self.mode)
            .set("n", self.n)
            .set("ell", self.ell)
            .set("c", self.c)
            .set("cmax", self.cmax)
            .set("theta", self.theta)
            .set("alpha", self.alpha)
            .set("mu", self.mu)
            .set("nodes", self.nodes)
            .set("noise_std", self.noise_std)
            .set("seed", self.seed);
        resolve(self.config.as_deref(), f.into_map())
    }
}

pub fn run(cfg: &RouteConfig) -> CliResult<RunReport> {
    if cfg.input.as_os_str().is_empty() {
        return Err(CliError::usage("no input file given"));
    }
    if cfg.nodes == 0 {
        return Err(CliError::usage("nodes must be at least 1"));
    }
    if !(cfg.alpha >= 0.0 && cfg.mu >= 0.0) {
        return Err(CliError::usage("alpha and mu must be >= 0"));
    }
    let batch = io::load(&cfg.input)?;
    let s = batch.s();
    let scores = match cfg.input_kind {
        InputKind::Scores => ScoreMatrix::new(batch.into_inner())?,
        InputKind::Tokens => {
            let n = cfg.n.unwrap_or(batch.d());
            let w = grap_weights(batch.d(), n)?;
            affinity_scores(&batch, w.view())?
        }
    };
    let n = scores.n();
    let plan = match cfg.mode {
        Mode::Tcr => route_tcr(&scores, cfg.ell, cfg.c.unwrap_or(s))?,
        Mode::Ecr => route_ecr(&scores, cfg.c.unwrap_or(s))?,
        Mode::Hybrid => route_hybrid(&scores, cfg.cmax.unwrap_or(s), cfg.theta)?,
    };
    let gates = gate_probabilities(&scores, cfg.noise_std, cfg.seed)?;
    let stats = load_stats(gates.view(), &plan)?;
    let nodes = NodeDistribution::from_plan(&plan, contiguous_placement(n, cfg.nodes), home_distribution(s, cfg.nodes))?;
    let payload = json!({
        "s": s,
        "n": n,
        "plan": plan,
        "load": stats,
        "aux_loss": aux_loss(&stats, cfg.alpha),
        "locality_loss": locality_loss(&nodes, cfg.mu, LOCALITY_EPS),
        "node_distribution": nodes,
    });
    Ok(RunReport::new("route", cfg.seed, serde_json::to_value(cfg).expect("config serializes"), payload))
}

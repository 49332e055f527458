use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use moelab::gating::io;
use moelab::synthetic::{block_cluster, correlation_matrix, sample_clustered, sample_isotropic};

use crate::config::{resolve, Flags};
use crate::error::{CliError, CliResult};
use crate::report::{sha256_hex, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Isotropic,
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub kind: Kind,
    pub s: usize,
    pub d: usize,
    /// Cluster count; also the block layout used for the summary statistics.
    pub n: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self { kind: Kind::Isotropic, s: 256, d: 512, n: 4, concentration: 10.0, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(value_enum)]
    pub kind: Option<Kind>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub concentration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes the token matrix as CSV.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Writes the token correlation matrix as CSV.
    #[arg(long)]
    pub correlation: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl FeaturesArgs {
    pub fn resolve(&self) -> CliResult<FeaturesConfig> {
        let mut f = Flags::default();
        f.set("kind", self.kind)
            .set("s", self.s)
            .set("d", self.d)
            .set("n", self.n)
            .set("concentration", self.concentration)
            .set("seed", self.seed);
        resolve(self.config.as_deref(), f.into_map())
    }
}

fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &PathBuf, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn run(cfg: &FeaturesConfig, tokens: Option<&PathBuf>, correlation: Option<&PathBuf>) -> CliResult<RunReport> {
    if cfg.n == 0 {
        return Err(CliError::usage("n must be at least 1"));
    }
    let batch = match cfg.kind {
        Kind::Isotropic => sample_isotropic(cfg.s, cfg.d, cfg.seed)?,
        Kind::Clustered => sample_clustered(cfg.s, cfg.d, cfg.n, cfg.concentration, cfg.seed)?,
    };
    let corr = correlation_matrix(&batch)?;
    let (mut off, mut within, mut between) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for a in 0..cfg.s {
        for b in 0..a {
            let v = corr[[a, b]];
            off.0 += v.abs();
            off.1 += 1;
            let slot = if block_cluster(a, cfg.s, cfg.n) == block_cluster(b, cfg.s, cfg.n) { &mut within } else { &mut between };
            slot.0 += v;
            slot.1 += 1;
        }
    }
    let mean = |(sum, count): (f64, usize)| if count == 0 { None } else { Some(sum / count as f64) };
    let token_csv = io::to_csv(&batch);
    if let Some(p) = tokens {
        write(p, &token_csv)?;
    }
    if let Some(p) = correlation {
        let rows: Vec<Vec<f64>> = corr.outer_iter().map(|r| r.to_vec()).collect();
        write(p, &matrix_csv(&rows))?;
    }
    let payload = json!({
        "kind": cfg.kind,
        "s": cfg.s,
        "d": cfg.d,
        "mean_abs_offdiag_correlation": mean(off),
        "within_block_mean_correlation": mean(within),
        "between_block_mean_correlation": mean(between),
        "tokens_sha256": sha256_hex(token_csv.as_bytes()),
    });
    Ok(RunReport::new("features", cfg.seed, serde_json::to_value(cfg).expect("config serializes"), payload))
}

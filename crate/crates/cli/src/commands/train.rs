use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use moelab::training::{TrainConfig, Trainer};

use crate::config::{resolve, Flags};
use crate::error::{CliError, CliResult, EXIT_DATA};
use crate::report::{sha256_f64, sha256_hex, RunReport};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub auto_switch: Option<f64>,
    /// Where the per-step metrics CSV is written.
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut f = Flags::default();
        f.set("steps", self.steps)
            .set("batch_size", self.batch_size)
            .set("learning_rate", self.learning_rate)
            .set("seed", self.seed)
            .set("auto_switch", self.auto_switch);
        resolve(self.config.as_deref(), f.into_map())
    }
}

fn write_metrics(path: &Path, csv: &str) -> CliResult<()> {
    std::fs::write(path, csv)
        .map_err(|e| CliError { code: EXIT_DATA, message: format!("cannot write {}: {e}", path.display()), detail: None })
}

pub fn run(cfg: &TrainConfig, metrics: &Path) -> CliResult<RunReport> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let initial = sha256_f64(&trainer.model().flat_parameters());
    let outcome = trainer.run();
    let csv = trainer.log().to_csv();
    write_metrics(metrics, &csv)?;
    if let Err(e) = outcome {
        let last = serde_json::to_value(trainer.log().last()).expect("metrics serialize");
        return Err(CliError::from(e).with_detail(json!({ "last_step": last })));
    }
    let last = trainer.log().last().expect("at least one step").clone();
    let payload = json!({
        "steps": trainer.log().rows.len(),
        "final_dispatch_success": last.dispatch_success,
        "final": last,
        "initial_parameters_sha256": initial,
        "final_parameters_sha256": sha256_f64(&trainer.model().flat_parameters()),
        "metrics_sha256": sha256_hex(csv.as_bytes()),
    });
    Ok(RunReport::new("train", cfg.seed, serde_json::to_value(cfg).expect("config serializes"), payload))
}

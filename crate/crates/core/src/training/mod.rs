//! Toy end-to-end training on the class-discriminative patch model.
//!
//! A sample holds one pattern token `o_y` among `s - 1` noise tokens. The
//! model routes every token, lets the selected experts classify it and
//! averages their gate-weighted logits. A sample is dispatched successfully
//! when `o_y` reaches expert `y`.
//!
//! Dispatch decisions are held fixed during differentiation: the router
//! learns only through the gate values of the pairs that were processed, and
//! dropped tokens contribute neither output nor gradient. The argmax load
//! fractions of the auxiliary loss and the locality loss are constants with
//! respect to the parameters.

mod model;

pub use model::{grad_check, Forward, GradCheck, Gradients, RouterMode, ToyMoE};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::affinity_scores;
use crate::losses::{contiguous_placement, home_distribution, locality_loss, NodeDistribution, LOCALITY_EPS};
use crate::rng::derive_seed;
use crate::routing::{adaptive_capacity, CapacityEstimate};
use crate::synthetic::{estimate_fp_rate, make_sample, LabeledSample, NoiseKind, PatternBank};

/// Loss above which a run is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const SEED_PATTERNS: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_FP: u64 = 3;
const SEED_INIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CapacityPolicy {
    /// Use the scheduled mode's capacity as given.
    Fixed,
    /// Replace the scheduled capacity by the adaptive estimate, computed per
    /// sample in order with an EMA over samples.
    Adaptive { theta: f64, ema_alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub step: usize,
    pub mode: RouterMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub s: usize,
    pub d: usize,
    pub n: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Router step size as a multiple of `learning_rate`. Router gradients
    /// scale with the inverse norm of the GrAP rows, so the router needs a
    /// much smaller step than the experts.
    pub router_lr_scale: f64,
    pub seed: u64,
    /// Mode switches; the first entry must start at step 0.
    pub mode_schedule: Vec<ScheduleEntry>,
    /// Auxiliary loss weight.
    pub alpha: f64,
    /// Locality loss weight.
    pub mu: f64,
    /// Node count used by the locality loss.
    pub nodes: usize,
    pub capacity_policy: CapacityPolicy,
    pub learn_router: bool,
    /// Cosine between each pattern and its GrAP row.
    pub alignment: f64,
    pub noise: NoiseKind,
    pub init_std: f64,
    /// Noise draws per false-positive estimate; the same draws are reused at
    /// every step.
    pub q_hat_trials: u64,
    /// When set, the mode is chosen by [`switch_policy`] with this `C*` at
    /// every step instead of by the schedule.
    pub auto_switch: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            s: 64,
            d: 64,
            n: 4,
            steps: 500,
            batch_size: 8,
            learning_rate: 20.0,
            router_lr_scale: 0.025,
            seed: 0,
            mode_schedule: vec![ScheduleEntry { step: 0, mode: RouterMode::Tcr { capacity: 64 } }],
            alpha: 0.0,
            mu: 0.0,
            nodes: 2,
            capacity_policy: CapacityPolicy::Fixed,
            learn_router: true,
            alignment: 0.2,
            noise: NoiseKind::Clustered { concentration: 1.0 },
            init_std: 0.1,
            q_hat_trials: 2000,
            auto_switch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.s == 0 || self.d == 0 || self.n == 0 {
            return bad(format!("need s, d, n >= 1, got s={}, d={}, n={}", self.s, self.d, self.n));
        }
        if self.d % self.n != 0 {
            return bad(format!("n={} must divide d={}", self.n, self.d));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        for (name, v) in [("router_lr_scale", self.router_lr_scale), ("alpha", self.alpha), ("mu", self.mu), ("init_std", self.init_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if !(self.alignment > 0.0 && self.alignment <= 1.0) {
            return bad(format!("alignment must be in (0, 1], got {}", self.alignment));
        }
        if self.q_hat_trials == 0 {
            return bad("q_hat_trials must be at least 1".into());
        }
        match self.mode_schedule.first() {
            None => return bad("mode_schedule is empty".into()),
            Some(e) if e.step != 0 => return bad(format!("mode_schedule must start at step 0, starts at {}", e.step)),
            _ => {}
        }
        for w in self.mode_schedule.windows(2) {
            if w[1].step <= w[0].step {
                return bad(format!("mode_schedule steps must be strictly increasing ({} then {})", w[0].step, w[1].step));
            }
        }
        for e in &self.mode_schedule {
            e.mode.validate()?;
        }
        if let CapacityPolicy::Adaptive { theta, ema_alpha } = self.capacity_policy {
            if !(theta > 0.0) || !theta.is_finite() {
                return bad(format!("adaptive theta must be finite and > 0, got {theta}"));
            }
            if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
                return bad(format!("ema_alpha must be in (0, 1], got {ema_alpha}"));
            }
        }
        if let Some(c) = self.auto_switch {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("auto_switch C* must be finite and > 0, got {c}"));
            }
        }
        Ok(())
    }

    /// Scheduled mode at `step`.
    pub fn scheduled_mode(&self, step: usize) -> RouterMode {
        self.mode_schedule.iter().take_while(|e| e.step <= step).last().map_or(self.mode_schedule[0].mode, |e| e.mode)
    }
}

/// Expert choice with `C = max(1, ceil(2 C*))` when every expert sees at most
/// `C*` expected false positives (`s q̂_i <= C*`), token choice with `C = s`
/// otherwise.
pub fn switch_policy(q_hat: &[f64], s: usize, c_star: f64) -> Result<RouterMode> {
    if q_hat.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidArgument("q_hat entries must lie in [0, 1]".into()));
    }
    if !(c_star > 0.0) || !c_star.is_finite() {
        return Err(Error::InvalidArgument(format!("C* must be finite and > 0, got {c_star}")));
    }
    if q_hat.iter().all(|q| s as f64 * q <= c_star) {
        let c = (2.0 * c_star).ceil().max(1.0);
        let capacity = if c >= usize::MAX as f64 { usize::MAX } else { c as usize };
        Ok(RouterMode::Ecr { capacity })
    } else {
        Ok(RouterMode::Tcr { capacity: s })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub loc_loss: f64,
    /// Fraction of samples whose pattern token reached its expert.
    pub dispatch_success: f64,
    /// Mean capacity used per sample.
    pub capacity: f64,
    pub mode: String,
    /// Largest per-expert false-positive estimate before this step's update.
    pub q_hat_max: f64,
    /// Mean number of processed (token, expert) slots per sample.
    pub token_slots: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<StepMetrics>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str = "step,task_loss,aux_loss,loc_loss,dispatch_success,capacity,mode,q_hat_max";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step, r.task_loss, r.aux_loss, r.loc_loss, r.dispatch_success, r.capacity, r.mode, r.q_hat_max
            );
        }
        out
    }

    pub fn last(&self) -> Option<&StepMetrics> {
        self.rows.last()
    }

    /// Mean of `f` over steps in `range`.
    pub fn mean_over(&self, range: std::ops::Range<usize>, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        let sel: Vec<f64> = self.rows.iter().filter(|r| range.contains(&r.step)).map(f).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Owns the model and runs SGD steps one at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: ToyMoE,
    bank: PatternBank,
    capacity: CapacityEstimate,
    log: MetricsLog,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = PatternBank::grap_aligned(cfg.d, cfg.n, cfg.alignment, cfg.noise, derive_seed(cfg.seed, SEED_PATTERNS))?;
        let model = ToyMoE::new(cfg.d, cfg.n, cfg.init_std, derive_seed(cfg.seed, SEED_INIT))?;
        Ok(Self { cfg, model, bank, capacity: CapacityEstimate::initial(), log: MetricsLog::default(), step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ToyMoE {
        &self.model
    }

    pub fn bank(&self) -> &PatternBank {
        &self.bank
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Samples of `step`, each from its own seed.
    pub fn batch(&self, step: usize) -> Result<Vec<LabeledSample>> {
        let cfg = &self.cfg;
        let data_seed = derive_seed(cfg.seed, SEED_DATA);
        (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| make_sample(cfg.s, cfg.d, &self.bank, derive_seed(data_seed, (step * cfg.batch_size + b) as u64)))
            .collect()
    }

    /// Current per-expert false-positive estimate of the router.
    pub fn q_hat(&self) -> Result<Vec<f64>> {
        Ok(estimate_fp_rate(&self.bank, self.model.router.view(), self.cfg.q_hat_trials, derive_seed(self.cfg.seed, SEED_FP))?.q_hat)
    }

    /// Runs one SGD step and appends its metrics. A diverged step is logged
    /// before the error is returned.
    pub fn step(&mut self) -> Result<&StepMetrics> {
        let cfg = self.cfg.clone();
        let step = self.step;
        let q_hat = self.q_hat()?;
        let q_hat_max = q_hat.iter().copied().fold(0.0, f64::max);
        let mode = match cfg.auto_switch {
            Some(c_star) => switch_policy(&q_hat, cfg.s, c_star)?,
            None => cfg.scheduled_mode(step),
        };
        let placement = contiguous_placement(cfg.n, cfg.nodes);
        let home = home_distribution(cfg.s, cfg.nodes);

        let samples = self.batch(step)?;
        let mut grads = Gradients::zeros(cfg.n, cfg.d);
        let (mut task, mut aux, mut loc, mut hits, mut cap, mut slots) = (0.0, 0.0, 0.0, 0usize, 0.0, 0.0);
        for smp in &samples {
            let scores = affinity_scores(&smp.batch, self.model.router.view())?;
            let used = match cfg.capacity_policy {
                CapacityPolicy::Fixed => mode,
                CapacityPolicy::Adaptive { theta, ema_alpha } => {
                    self.capacity = adaptive_capacity(&scores, cfg.d, theta, &self.capacity, ema_alpha)?;
                    mode.with_capacity(self.capacity.c_effective)
                }
            };
            let plan = used.route(&scores)?;
            let fwd = self.model.forward_with_plan(&smp.batch, scores, plan)?;
            let (t, a, g) = self.model.sample_gradients(&smp.batch, smp.label, &fwd, cfg.alpha)?;
            let nd = NodeDistribution::from_plan(&fwd.plan, placement.clone(), home.clone())?;
            task += t;
            aux += a;
            loc += locality_loss(&nd, cfg.mu, LOCALITY_EPS);
            hits += usize::from(fwd.plan.contains(smp.disc_position, smp.label));
            cap += used.capacity() as f64;
            slots += fwd.pairs() as f64;
            grads.add_assign(&g);
        }
        let b = samples.len() as f64;
        grads.scale(1.0 / b);
        self.log.rows.push(StepMetrics {
            step,
            task_loss: task / b,
            aux_loss: aux / b,
            loc_loss: loc / b,
            dispatch_success: hits as f64 / b,
            capacity: cap / b,
            mode: mode.name().to_string(),
            q_hat_max,
            token_slots: slots / b,
        });
        let total = (task + aux + loc) / b;
        if !total.is_finite() || total > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss: total });
        }
        let router_lr = if cfg.learn_router { cfg.learning_rate * cfg.router_lr_scale } else { 0.0 };
        self.model.apply(&grads, cfg.learning_rate, router_lr);
        self.step += 1;
        Ok(self.log.rows.last().expect("row just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains `cfg` to completion.
pub fn train(cfg: &TrainConfig) -> Result<MetricsLog> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run()?;
    Ok(trainer.into_log())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            s: 16,
            d: 16,
            steps,
            batch_size: 4,
            mode_schedule: vec![ScheduleEntry { step: 0, mode: RouterMode::Tcr { capacity: 16 } }],
            q_hat_trials: 200,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn switch_policy_cases() {
        assert_eq!(switch_policy(&[0.0; 4], 256, 16.0).unwrap(), RouterMode::Ecr { capacity: 32 });
        assert_eq!(switch_policy(&[0.5; 4], 256, 16.0).unwrap(), RouterMode::Tcr { capacity: 256 });
        assert_eq!(switch_policy(&[0.0625, 0.0], 256, 16.0).unwrap(), RouterMode::Ecr { capacity: 32 });
        assert_eq!(switch_policy(&[0.0], 10, 0.2).unwrap(), RouterMode::Ecr { capacity: 1 });
        assert!(switch_policy(&[1.5], 10, 1.0).is_err());
        assert!(switch_policy(&[0.1], 10, 0.0).is_err());
    }

    #[test]
    fn schedule_lookup_and_validation() {
        let mut cfg = small(10);
        cfg.mode_schedule.push(ScheduleEntry { step: 5, mode: RouterMode::Ecr { capacity: 4 } });
        cfg.validate().unwrap();
        assert_eq!(cfg.scheduled_mode(4), RouterMode::Tcr { capacity: 16 });
        assert_eq!(cfg.scheduled_mode(5), RouterMode::Ecr { capacity: 4 });
        assert_eq!(cfg.scheduled_mode(9), RouterMode::Ecr { capacity: 4 });
        cfg.mode_schedule.push(ScheduleEntry { step: 5, mode: RouterMode::Tcr { capacity: 4 } });
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { steps: 0, ..small(1) }.validate().is_err());
        assert!(TrainConfig { mode_schedule: vec![], ..small(1) }.validate().is_err());
        assert!(TrainConfig { d: 18, ..small(1) }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let cfg = TrainConfig { learning_rate: 0.0, ..small(5) };
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.model().clone();
        tr.run().unwrap();
        assert_eq!(tr.model().flat_parameters(), before.flat_parameters());
    }

    #[test]
    fn frozen_router_stays_bit_identical() {
        let cfg = TrainConfig { learn_router: false, ..small(5) };
        let mut tr = Trainer::new(cfg).unwrap();
        let router = tr.model().router.clone();
        tr.run().unwrap();
        assert_eq!(tr.model().router, router);
        assert_ne!(tr.model().experts, Trainer::new(small(5)).unwrap().model().experts);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train(&small(8)).unwrap();
        let b = train(&small(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a, train(&TrainConfig { seed: 1, ..small(8) }).unwrap());
    }

    #[test]
    fn aligned_patterns_dispatch_under_full_token_choice() {
        let cfg = TrainConfig { d: 64, learn_router: false, ..small(3) };
        let log = train(&cfg).unwrap();
        assert!(log.rows.iter().all(|r| r.dispatch_success >= 0.95));
    }

    #[test]
    fn metrics_are_well_formed() {
        let log = train(&TrainConfig { alpha: 0.01, mu: 0.1, ..small(6) }).unwrap();
        assert_eq!(log.rows.len(), 6);
        for (i, r) in log.rows.iter().enumerate() {
            assert_eq!(r.step, i);
            assert!((0.0..=1.0).contains(&r.dispatch_success));
            assert!(r.aux_loss > 0.0 && r.loc_loss >= 0.0);
        }
        let csv = log.to_csv();
        assert!(csv.starts_with(MetricsLog::CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn divergence_is_reported_with_the_failing_row() {
        let cfg = TrainConfig { learning_rate: 1e12, init_std: 1.0, ..small(50) };
        let mut tr = Trainer::new(cfg).unwrap();
        let err = tr.run().unwrap_err();
        let Error::Divergence { step, .. } = err else { panic!("{err}") };
        assert_eq!(tr.log().last().unwrap().step, step);
    }

    #[test]
    fn adaptive_capacity_drives_the_mode() {
        let cfg = TrainConfig {
            mode_schedule: vec![ScheduleEntry { step: 0, mode: RouterMode::Hybrid { cmax: 16, theta: 0.5 } }],
            capacity_policy: CapacityPolicy::Adaptive { theta: 0.5, ema_alpha: 0.1 },
            ..small(4)
        };
        let log = train(&cfg).unwrap();
        assert!(log.rows.iter().all(|r| r.capacity >= 1.0 && r.capacity <= 16.0 && r.mode == "HYBRID"));
    }
}

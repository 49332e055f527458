//! A toy MoE classifier: cosine router, softmax gate, linear experts.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{affinity_scores, grap_weights, softmax, ScoreMatrix, TokenBatch};
use crate::losses::{aux_loss, load_stats};
use crate::rng::substream;
use crate::routing::{route_ecr, route_hybrid, route_tcr, DispatchPlan};

/// Dispatch rule used by the model, with its capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RouterMode {
    Tcr { capacity: usize },
    Ecr { capacity: usize },
    Hybrid { cmax: usize, theta: f64 },
}

impl RouterMode {
    pub fn name(&self) -> &'static str {
        match self {
            RouterMode::Tcr { .. } => "TCR",
            RouterMode::Ecr { .. } => "ECR",
            RouterMode::Hybrid { .. } => "HYBRID",
        }
    }

    pub fn capacity(&self) -> usize {
        match *self {
            RouterMode::Tcr { capacity } | RouterMode::Ecr { capacity } => capacity,
            RouterMode::Hybrid { cmax, .. } => cmax,
        }
    }

    /// Same rule with its capacity (or `cmax`) replaced.
    pub fn with_capacity(self, c: usize) -> Self {
        match self {
            RouterMode::Tcr { .. } => RouterMode::Tcr { capacity: c },
            RouterMode::Ecr { .. } => RouterMode::Ecr { capacity: c },
            RouterMode::Hybrid { theta, .. } => RouterMode::Hybrid { cmax: c, theta },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity() == 0 {
            return Err(Error::InvalidArgument(format!("{} capacity must be at least 1", self.name())));
        }
        if let RouterMode::Hybrid { theta, .. } = *self {
            if !(theta > 0.0) || !theta.is_finite() {
                return Err(Error::InvalidArgument(format!("hybrid theta must be finite and > 0, got {theta}")));
            }
        }
        Ok(())
    }

    /// Routes one sample. Token choice uses a single candidate per token.
    pub fn route(&self, scores: &ScoreMatrix) -> Result<DispatchPlan> {
        match *self {
            RouterMode::Tcr { capacity } => route_tcr(scores, 1, capacity),
            RouterMode::Ecr { capacity } => route_ecr(scores, capacity),
            RouterMode::Hybrid { cmax, theta } => route_hybrid(scores, cmax, theta),
        }
    }
}

impl std::fmt::Display for RouterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            RouterMode::Tcr { capacity } => write!(f, "TCR(C={capacity})"),
            RouterMode::Ecr { capacity } => write!(f, "ECR(C={capacity})"),
            RouterMode::Hybrid { cmax, theta } => write!(f, "HYBRID(Cmax={cmax}, theta={theta})"),
        }
    }
}

/// Router weights (`n x d`) and `n` linear experts mapping `d` features to
/// `n` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMoE {
    pub router: Array2<f64>,
    /// `experts[[i, class, feature]]`.
    pub experts: Array3<f64>,
    /// `bias[[i, class]]`.
    pub bias: Array2<f64>,
}

/// Gradients with the same layout as [`ToyMoE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub router: Array2<f64>,
    pub experts: Array3<f64>,
    pub bias: Array2<f64>,
}

impl Gradients {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { router: Array2::zeros((n, d)), experts: Array3::zeros((n, n, d)), bias: Array2::zeros((n, n)) }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.router += &other.router;
        self.experts += &other.experts;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, c: f64) {
        self.router *= c;
        self.experts *= c;
        self.bias *= c;
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub scores: ScoreMatrix,
    /// Softmax gate probabilities, `s x n`.
    pub gates: Array2<f64>,
    pub plan: DispatchPlan,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl Forward {
    /// Number of dispatched (token, expert) pairs.
    pub fn pairs(&self) -> usize {
        self.plan.assigned()
    }
}

impl ToyMoE {
    /// GrAP router and experts drawn from `N(0, init_std²)`; biases start at 0.
    pub fn new(d: usize, n: usize, init_std: f64, seed: u64) -> Result<Self> {
        let router = grap_weights(d, n)?.weights().clone();
        let normal = Normal::new(0.0, init_std)
            .map_err(|_| Error::InvalidArgument(format!("init_std must be finite and >= 0, got {init_std}")))?;
        let mut rng = substream(seed, 0);
        let experts = Array3::from_shape_simple_fn((n, n, d), || normal.sample(&mut rng));
        Ok(Self { router, experts, bias: Array2::zeros((n, n)) })
    }

    pub fn n(&self) -> usize {
        self.router.nrows()
    }

    pub fn d(&self) -> usize {
        self.router.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let (n, d) = self.router.dim();
        if self.experts.dim() != (n, n, d) || self.bias.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "router {n}x{d} needs experts {n}x{n}x{d} and bias {n}x{n}, got {:?} and {:?}",
                self.experts.dim(),
                self.bias.dim()
            )));
        }
        Ok(())
    }

    /// All parameters in a fixed order: router, expert weights, biases.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.router.iter().chain(self.experts.iter()).chain(self.bias.iter()).copied().collect()
    }

    fn expert_output(&self, i: usize, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.experts.index_axis(Axis(0), i).dot(&x) + self.bias.row(i)
    }

    /// Scores, gates and the plan chosen by `mode`, then the class output.
    pub fn forward(&self, batch: &TokenBatch, mode: &RouterMode) -> Result<Forward> {
        let scores = affinity_scores(batch, self.router.view())?;
        let plan = mode.route(&scores)?;
        self.forward_with_plan(batch, scores, plan)
    }

    /// Class output for a fixed plan. Logits are the gate-weighted expert
    /// outputs averaged over dispatched pairs; no dispatch gives zero logits.
    pub fn forward_with_plan(&self, batch: &TokenBatch, scores: ScoreMatrix, plan: DispatchPlan) -> Result<Forward> {
        self.check()?;
        if batch.d() != self.d() || plan.n() != self.n() {
            return Err(Error::Shape(format!(
                "model is {}x{}, batch has d={} and plan has {} experts",
                self.n(),
                self.d(),
                batch.d(),
                plan.n()
            )));
        }
        plan.validate(batch.s())?;
        let mut gates = Array2::zeros((batch.s(), self.n()));
        for (t, mut row) in gates.outer_iter_mut().enumerate() {
            row.assign(&softmax(scores.row(t)));
        }
        let mut logits = Array1::zeros(self.n());
        for (i, tokens) in plan.experts.iter().enumerate() {
            for &t in tokens {
                logits.scaled_add(gates[[t, i]], &self.expert_output(i, batch.row(t)));
            }
        }
        let k = plan.assigned();
        if k > 0 {
            logits /= k as f64;
        }
        let probs = softmax(logits.view());
        Ok(Forward { scores, gates, plan, logits, probs })
    }

    /// Cross-entropy of `label` plus the auxiliary loss with weight `alpha`.
    pub fn loss(&self, fwd: &Forward, label: usize, alpha: f64) -> Result<(f64, f64)> {
        let top = fwd.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + fwd.logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
        let task = lse - fwd.logits[label];
        let aux = if alpha == 0.0 { 0.0 } else { aux_loss(&load_stats(fwd.gates.view(), &fwd.plan)?, alpha) };
        Ok((task, aux))
    }

    /// Gradients for an upstream derivative `dL/dlogits`, plus the auxiliary
    /// loss with weight `alpha`. The plan and the argmax load fractions are
    /// held fixed; router gradients flow through the gate values only.
    pub fn backward(&self, batch: &TokenBatch, fwd: &Forward, upstream: ArrayView1<'_, f64>, alpha: f64) -> Result<Gradients> {
        let (n, d) = (self.n(), self.d());
        let s = batch.s();
        let mut grads = Gradients::zeros(n, d);
        let mut dgates = Array2::<f64>::zeros((s, n));
        let k = fwd.pairs();
        if k > 0 {
            let inv = 1.0 / k as f64;
            for (i, tokens) in fwd.plan.experts.iter().enumerate() {
                for &t in tokens {
                    let x = batch.row(t);
                    let g = fwd.gates[[t, i]];
                    let out = self.expert_output(i, x);
                    dgates[[t, i]] += inv * upstream.dot(&out);
                    let u = &upstream * (inv * g);
                    let mut dw = grads.experts.index_axis_mut(Axis(0), i);
                    for c in 0..n {
                        dw.row_mut(c).scaled_add(u[c], &x);
                    }
                    grads.bias.row_mut(i).scaled_add(1.0, &u);
                }
            }
        }
        if alpha != 0.0 {
            let stats = load_stats(fwd.gates.view(), &fwd.plan)?;
            for i in 0..n {
                let c = alpha * n as f64 * stats.f[i] / s as f64;
                dgates.column_mut(i).mapv_inplace(|v| v + c);
            }
        }
        let wnorms: Vec<f64> = self.router.outer_iter().map(|w| w.dot(&w).sqrt()).collect();
        for t in 0..s {
            let g = fwd.gates.row(t);
            let dg = dgates.row(t);
            let mean = g.dot(&dg);
            let x = batch.row(t);
            let xhat = &x / x.dot(&x).sqrt();
            for j in 0..n {
                let ddelta = g[j] * (dg[j] - mean);
                if ddelta == 0.0 {
                    continue;
                }
                let w = self.router.row(j);
                let delta = fwd.scores.get(t, j);
                let dir = (&xhat - &(&w * (delta / wnorms[j]))) / wnorms[j];
                grads.router.row_mut(j).scaled_add(ddelta, &dir);
            }
        }
        Ok(grads)
    }

    /// Forward, loss and backward for one labelled sample.
    pub fn sample_gradients(&self, batch: &TokenBatch, label: usize, fwd: &Forward, alpha: f64) -> Result<(f64, f64, Gradients)> {
        let (task, aux) = self.loss(fwd, label, alpha)?;
        let mut upstream = fwd.probs.clone();
        upstream[label] -= 1.0;
        let grads = self.backward(batch, fwd, upstream.view(), alpha)?;
        Ok((task, aux, grads))
    }

    /// SGD update; a zero router step leaves the router untouched.
    pub fn apply(&mut self, grads: &Gradients, lr: f64, router_lr: f64) {
        if router_lr != 0.0 {
            self.router.scaled_add(-router_lr, &grads.router);
        }
        self.experts.scaled_add(-lr, &grads.experts);
        self.bias.scaled_add(-lr, &grads.bias);
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients, `|a - f| / max(|a|, |f|, 1e-6)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub parameters: usize,
}

/// Checks every parameter of `model` on one sample with step `h`. The
/// dispatch plan of the unperturbed model is held fixed.
pub fn grad_check(model: &ToyMoE, batch: &TokenBatch, label: usize, mode: &RouterMode, alpha: f64, h: f64) -> Result<GradCheck> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be finite and > 0, got {h}")));
    }
    if label >= model.n() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", model.n())));
    }
    let fwd = model.forward(batch, mode)?;
    let plan = fwd.plan.clone();
    let (_, _, grads) = model.sample_gradients(batch, label, &fwd, alpha)?;

    let objective = |m: &ToyMoE| -> Result<f64> {
        let scores = affinity_scores(batch, m.router.view())?;
        let f = m.forward_with_plan(batch, scores, plan.clone())?;
        let (task, aux) = m.loss(&f, label, alpha)?;
        Ok(task + aux)
    };

    let analytic: Vec<f64> = grads.router.iter().chain(grads.experts.iter()).chain(grads.bias.iter()).copied().collect();
    let mut probe = model.clone();
    let mut worst = GradCheck { max_relative_error: 0.0, max_abs_error: 0.0, parameters: analytic.len() };
    for (idx, &a) in analytic.iter().enumerate() {
        let original = param_mut(&mut probe, idx);
        let base = *original;
        *param_mut(&mut probe, idx) = base + h;
        let up = objective(&probe)?;
        *param_mut(&mut probe, idx) = base - h;
        let down = objective(&probe)?;
        *param_mut(&mut probe, idx) = base;
        let numeric = (up - down) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
        worst.max_abs_error = worst.max_abs_error.max(abs);
        worst.max_relative_error = worst.max_relative_error.max(rel);
    }
    Ok(worst)
}

fn param_mut(model: &mut ToyMoE, idx: usize) -> &mut f64 {
    let r = model.router.len();
    let e = model.experts.len();
    if idx < r {
        model.router.iter_mut().nth(idx)
    } else if idx < r + e {
        model.experts.iter_mut().nth(idx - r)
    } else {
        model.bias.iter_mut().nth(idx - r - e)
    }
    .expect("parameter index in range")
}

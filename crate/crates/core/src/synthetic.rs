//! Synthetic token features and the class-discriminative patch data model.
//!
//! Two noise distributions are provided. Isotropic tokens are uniform on the
//! unit sphere, which makes distinct tokens nearly orthogonal. Clustered
//! tokens concentrate around one center per expert, laid out in contiguous
//! blocks so that neighbouring tokens share features.
//!
//! Cluster centers live inside their expert's GrAP slice, so each center has
//! its top affinity with that expert, but only [`CLUSTER_CENTER_AFFINITY`] of
//! it: most of a center's mass is a zero-sum direction that GrAP pooling
//! cannot see.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::TokenBatch;
use crate::rng::{substream, Rng};

/// Cosine between a cluster center and its expert's GrAP row.
pub const CLUSTER_CENTER_AFFINITY: f64 = 0.2;

fn gaussian(d: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn normalized(mut v: Array1<f64>) -> Option<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| {
        v /= norm;
        v
    })
}

/// Uniform draw from the unit sphere in `d` dimensions.
pub fn sphere_point(d: usize, rng: &mut Rng) -> Array1<f64> {
    loop {
        if let Some(v) = normalized(gaussian(d, rng)) {
            return v;
        }
    }
}

/// `normalize(concentration * center + ξ)` with `ξ ~ N(0, I/d)`.
pub fn clustered_point(center: ArrayView1<'_, f64>, concentration: f64, rng: &mut Rng) -> Array1<f64> {
    let d = center.len();
    let scale = (d as f64).sqrt().recip();
    loop {
        let noise = gaussian(d, rng) * scale;
        if let Some(v) = normalized(&center * concentration + noise) {
            return v;
        }
    }
}

fn check_dims(s: usize, d: usize) -> Result<()> {
    if s == 0 || d == 0 {
        return Err(Error::invalid(format!("need s >= 1 and d >= 1, got s={s}, d={d}")));
    }
    Ok(())
}

fn check_groups(d: usize, n: usize) -> Result<usize> {
    if n == 0 || !d.is_multiple_of(n) {
        return Err(Error::invalid(format!("expert count {n} must divide feature dimension {d}")));
    }
    Ok(d / n)
}

/// Unit vector along the GrAP row of expert `i`.
fn slice_direction(d: usize, p: usize, i: usize) -> Array1<f64> {
    let mut u = Array1::zeros(d);
    u.slice_mut(s![i * p..(i + 1) * p]).fill((p as f64).sqrt().recip());
    u
}

/// One center per expert: `κ u_g + sqrt(1 - κ²) v_g`, where `u_g` is the
/// expert's slice direction and `v_g` a fixed alternating-sign, zero-sum
/// direction inside the same slice. Width-1 slices have no zero-sum direction
/// and get `u_g` itself.
pub fn cluster_centers(d: usize, n: usize) -> Result<Array2<f64>> {
    let p = check_groups(d, n)?;
    let k = CLUSTER_CENTER_AFFINITY;
    let mut centers = Array2::zeros((n, d));
    for g in 0..n {
        let u = slice_direction(d, p, g);
        let row = if p < 2 {
            u
        } else {
            let pairs = p / 2;
            let mut v = Array1::zeros(d);
            for j in 0..2 * pairs {
                v[g * p + j] = if j % 2 == 0 { 1.0 } else { -1.0 };
            }
            v /= ((2 * pairs) as f64).sqrt();
            u * k + v * (1.0 - k * k).sqrt()
        };
        centers.row_mut(g).assign(&row);
    }
    Ok(centers)
}

/// `s` tokens drawn uniformly from the unit sphere.
pub fn sample_isotropic(s: usize, d: usize, seed: u64) -> Result<TokenBatch> {
    check_dims(s, d)?;
    let mut rng = substream(seed, 0);
    let mut tokens = Array2::zeros((s, d));
    for mut row in tokens.outer_iter_mut() {
        row.assign(&sphere_point(d, &mut rng));
    }
    TokenBatch::new(tokens)
}

/// Cluster of token `t` when `s` tokens are laid out in contiguous blocks of
/// `round(s / n)` tokens, cycling through the `n` clusters.
pub fn block_cluster(t: usize, s: usize, n: usize) -> usize {
    let block = ((s as f64 / n as f64).round() as usize).max(1);
    (t / block) % n
}

/// `s` tokens clustered around the expert centers in contiguous blocks.
/// `concentration = 0` is the isotropic distribution.
pub fn sample_clustered(s: usize, d: usize, n: usize, concentration: f64, seed: u64) -> Result<TokenBatch> {
    check_dims(s, d)?;
    if !(concentration >= 0.0) || !concentration.is_finite() {
        return Err(Error::invalid(format!("concentration must be finite and >= 0, got {concentration}")));
    }
    let centers = cluster_centers(d, n)?;
    let mut rng = substream(seed, 0);
    let mut tokens = Array2::zeros((s, d));
    for (t, mut row) in tokens.outer_iter_mut().enumerate() {
        row.assign(&clustered_point(centers.row(block_cluster(t, s, n)), concentration, &mut rng));
    }
    TokenBatch::new(tokens)
}

/// Pearson correlation between every pair of token rows.
pub fn correlation_matrix(batch: &TokenBatch) -> Result<Array2<f64>> {
    let s = batch.s();
    if s < 2 {
        return Err(Error::invalid("correlation needs at least two tokens"));
    }
    let mut centered = batch.tokens().clone();
    for (t, mut row) in centered.outer_iter_mut().enumerate() {
        let mean = row.mean().unwrap_or(0.0);
        row -= mean;
        let norm = row.dot(&row).sqrt();
        if norm <= f64::EPSILON * (1.0 + mean.abs()) * (row.len() as f64).sqrt() {
            return Err(Error::ZeroVariance(t));
        }
        row /= norm;
    }
    let mut corr = centered.dot(&centered.t());
    for a in 0..s {
        corr[[a, a]] = 1.0;
        for b in 0..a {
            let v = corr[[a, b]].clamp(-1.0, 1.0);
            corr[[a, b]] = v;
            corr[[b, a]] = v;
        }
    }
    Ok(corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Isotropic,
    Clustered { concentration: f64 },
}

/// Class-discriminative patterns `o_1..o_n` plus the distribution of the
/// class-irrelevant tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    patterns: Array2<f64>,
    noise: NoiseKind,
    centers: Array2<f64>,
}

impl PatternBank {
    /// Uses the given patterns as-is; each row must be unit norm and `n` must
    /// divide `d`.
    pub fn new(patterns: Array2<f64>, noise: NoiseKind) -> Result<Self> {
        let (n, d) = patterns.dim();
        check_dims(n, d)?;
        for (i, row) in patterns.outer_iter().enumerate() {
            if (row.dot(&row).sqrt() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("pattern {i} is not unit norm")));
            }
        }
        if let NoiseKind::Clustered { concentration } = noise {
            if !(concentration >= 0.0) || !concentration.is_finite() {
                return Err(Error::invalid("concentration must be finite and >= 0"));
            }
        }
        let centers = cluster_centers(d, n)?;
        Ok(Self { patterns, noise, centers })
    }

    /// Patterns inside each expert's GrAP slice with `cos(o_i, w_i) =
    /// alignment`: `o_i = a u_i + sqrt(1 - a²) v_i` with `v_i` a random
    /// zero-sum unit direction in the slice. Every other expert scores `o_i`
    /// at exactly zero, so `o_i` routes to expert `i` whenever `a > 0`.
    pub fn grap_aligned(d: usize, n: usize, alignment: f64, noise: NoiseKind, seed: u64) -> Result<Self> {
        let p = check_groups(d, n)?;
        if !(alignment > 0.0 && alignment <= 1.0) {
            return Err(Error::invalid(format!("alignment must be in (0, 1], got {alignment}")));
        }
        let mut rng = substream(seed, 0);
        let mut patterns = Array2::zeros((n, d));
        for i in 0..n {
            let u = slice_direction(d, p, i);
            let row = if p < 2 || alignment == 1.0 {
                u
            } else {
                let v = loop {
                    let mut g = gaussian(p, &mut rng);
                    let mean = g.mean().unwrap_or(0.0);
                    g -= mean;
                    if let Some(v) = normalized(g) {
                        break v;
                    }
                };
                let mut full = Array1::zeros(d);
                full.slice_mut(s![i * p..(i + 1) * p]).assign(&v);
                normalized(u * alignment + full * (1.0 - alignment * alignment).sqrt()).expect("unit combination")
            };
            patterns.row_mut(i).assign(&row);
        }
        Self::new(patterns, noise)
    }

    pub fn n(&self) -> usize {
        self.patterns.nrows()
    }

    pub fn d(&self) -> usize {
        self.patterns.ncols()
    }

    pub fn patterns(&self) -> &Array2<f64> {
        &self.patterns
    }

    pub fn pattern(&self, i: usize) -> ArrayView1<'_, f64> {
        self.patterns.row(i)
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    /// One class-irrelevant token; clustered noise picks its cluster uniformly.
    pub fn noise_token(&self, rng: &mut Rng) -> Array1<f64> {
        match self.noise {
            NoiseKind::Isotropic => sphere_point(self.d(), rng),
            NoiseKind::Clustered { concentration } => {
                let g = rng.random_range(0..self.n());
                clustered_point(self.centers.row(g), concentration, rng)
            }
        }
    }

    /// Irrelevant token at position `t` of an `s`-token sample; clustered
    /// noise follows the contiguous block layout.
    fn noise_at(&self, t: usize, s: usize, rng: &mut Rng) -> Array1<f64> {
        match self.noise {
            NoiseKind::Isotropic => sphere_point(self.d(), rng),
            NoiseKind::Clustered { concentration } => {
                clustered_point(self.centers.row(block_cluster(t, s, self.n())), concentration, rng)
            }
        }
    }
}

/// A sample of the patch model: one discriminative token among noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub batch: TokenBatch,
    pub label: usize,
    pub disc_position: usize,
}

/// Draws a sample: uniform position and label, `o_label` at that position and
/// bank noise everywhere else.
pub fn make_sample(s: usize, d: usize, bank: &PatternBank, seed: u64) -> Result<LabeledSample> {
    check_dims(s, d)?;
    if d != bank.d() {
        return Err(Error::Shape(format!("sample dimension {d} does not match pattern dimension {}", bank.d())));
    }
    let mut rng = substream(seed, 0);
    let disc_position = rng.random_range(0..s);
    let label = rng.random_range(0..bank.n());
    let mut tokens = Array2::zeros((s, d));
    for (t, mut row) in tokens.outer_iter_mut().enumerate() {
        if t == disc_position {
            row.assign(&bank.pattern(label));
        } else {
            row.assign(&bank.noise_at(t, s, &mut rng));
        }
    }
    Ok(LabeledSample { batch: TokenBatch::new(tokens)?, label, disc_position })
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpEstimate {
    pub q_hat: Vec<f64>,
    pub std_error: Vec<f64>,
    pub trials: u64,
}

impl FpEstimate {
    pub fn max(&self) -> f64 {
        self.q_hat.iter().copied().fold(0.0, f64::max)
    }
}

/// Empirical false-positive rate per expert: the fraction of noise draws `r`
/// with `cos(r, w_i) > cos(o_i, w_i)`.
pub fn estimate_fp_rate(bank: &PatternBank, weights: ArrayView2<'_, f64>, trials: u64, seed: u64) -> Result<FpEstimate> {
    let (n, d) = weights.dim();
    if n != bank.n() || d != bank.d() {
        return Err(Error::Shape(format!("weights are {n}x{d}, bank is {}x{}", bank.n(), bank.d())));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let thresholds: Vec<f64> = (0..n).map(|i| cosine(bank.pattern(i), weights.row(i))).collect();
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("zero-norm expert weight row"));
    }
    let mut rng = substream(seed, 0);
    let mut hits = vec![0u64; n];
    for _ in 0..trials {
        let r = bank.noise_token(&mut rng);
        for i in 0..n {
            if cosine(r.view(), weights.row(i)) > thresholds[i] {
                hits[i] += 1;
            }
        }
    }
    let q_hat: Vec<f64> = hits.iter().map(|&h| h as f64 / trials as f64).collect();
    let std_error = q_hat.iter().map(|q| (q * (1.0 - q) / trials as f64).sqrt()).collect();
    Ok(FpEstimate { q_hat, std_error, trials })
}

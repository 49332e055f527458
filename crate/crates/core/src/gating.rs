//! GrAP gating weights, token/expert affinity and gate probabilities.
//!
//! The affinity of token `t` and expert `i` is the cosine of the angle between
//! the token features and the expert's gating row. With GrAP weights the rows
//! are disjoint slice indicators, so the gating layer partitions the feature
//! space into `n` non-overlapping groups of `p = d / n` coordinates.

pub mod io;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `s` token feature vectors of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    tokens: Array2<f64>,
}

impl TokenBatch {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        let (s, d) = tokens.dim();
        if s == 0 {
            return Err(Error::Empty);
        }
        if d == 0 {
            return Err(Error::invalid("token dimension must be at least 1"));
        }
        for ((t, f), v) in tokens.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { token: t, feature: f });
            }
        }
        Ok(Self { tokens })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let s = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let tokens = Array2::from_shape_vec((s, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(tokens)
    }

    pub fn s(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(t)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.tokens
    }

    /// Multiplies every feature by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.tokens * c)
    }
}

/// Orthogonal GrAP gating rows.
///
/// Row `i` holds `1/p` on coordinates `[i*p, (i+1)*p)` and zero elsewhere, so
/// `W x` is exactly the grouped average of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    weights: Array2<f64>,
    group_width: usize,
}

impl GatingWeights {
    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }

    pub fn group_width(&self) -> usize {
        self.group_width
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    /// Grouped average pooling of a single feature vector.
    pub fn pool(&self, x: ArrayView1<'_, f64>) -> ndarray::Array1<f64> {
        self.weights.dot(&x)
    }
}

/// Builds the GrAP gating weights for feature dimension `d` and `n` experts.
pub fn grap_weights(d: usize, n: usize) -> Result<GatingWeights> {
    if d == 0 || n == 0 {
        return Err(Error::invalid(format!("GrAP needs d >= 1 and n >= 1, got d={d}, n={n}")));
    }
    if !d.is_multiple_of(n) {
        return Err(Error::invalid(format!("expert count {n} does not divide feature dimension {d}")));
    }
    let p = d / n;
    let mut weights = Array2::zeros((n, d));
    for i in 0..n {
        for j in i * p..(i + 1) * p {
            weights[[i, j]] = 1.0 / p as f64;
        }
    }
    Ok(GatingWeights { weights, group_width: p })
}

/// `s x n` affinity scores, each a cosine in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ScoreMatrix {
    scores: Array2<f64>,
}

const SCORE_SLACK: f64 = 1e-12;

impl ScoreMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() == 0 {
            return Err(Error::Empty);
        }
        if scores.ncols() == 0 {
            return Err(Error::invalid("score matrix needs at least one expert"));
        }
        for ((t, i), v) in scores.indexed_iter() {
            if !v.is_finite() || v.abs() > 1.0 + SCORE_SLACK {
                return Err(Error::invalid(format!("score ({t}, {i}) = {v} is outside [-1, 1]")));
            }
        }
        Ok(Self { scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let s = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("score rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((s, n), flat).map_err(|e| Error::Shape(e.to_string()))?)
    }

    /// Token count.
    pub fn s(&self) -> usize {
        self.scores.nrows()
    }

    /// Expert count.
    pub fn n(&self) -> usize {
        self.scores.ncols()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.scores[[t, i]]
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.scores.row(t)
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.scores.column(i)
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// Largest affinity in the batch.
    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the highest-scoring expert for token `t`, lower index on ties.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(self.scores.row(t))
    }
}

impl TryFrom<Vec<Vec<f64>>> for ScoreMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ScoreMatrix> for Vec<Vec<f64>> {
    fn from(m: ScoreMatrix) -> Self {
        m.scores.outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// First index of the maximum, so ties go to the lower index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine affinity between every token and every expert row.
///
/// `weights` is any `n x d` matrix of expert directions: the GrAP weights, or a
/// learned router that started from them.
pub fn affinity_scores(batch: &TokenBatch, weights: ArrayView2<'_, f64>) -> Result<ScoreMatrix> {
    if batch.d() != weights.ncols() {
        return Err(Error::Shape(format!(
            "token dimension {} does not match gating dimension {}",
            batch.d(),
            weights.ncols()
        )));
    }
    let token_norms: Vec<f64> = batch.tokens.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(t) = token_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormToken(t));
    }
    let expert_norms: Vec<f64> = weights.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = expert_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormExpert(i));
    }
    let mut scores = batch.tokens.dot(&weights.t());
    for ((t, i), v) in scores.indexed_iter_mut() {
        *v = (*v / (token_norms[t] * expert_norms[i])).clamp(-1.0, 1.0);
    }
    Ok(ScoreMatrix { scores })
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: ArrayView1<'_, f64>) -> ndarray::Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let z = out.sum();
    out /= z;
    out
}

/// Row-wise softmax of the scores plus zero-mean Gaussian noise.
///
/// `noise_std == 0` draws nothing and is fully deterministic.
pub fn gate_probabilities(scores: &ScoreMatrix, noise_std: f64, seed: u64) -> Result<Array2<f64>> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid(format!("noise_std must be a finite value >= 0, got {noise_std}")));
    }
    let mut logits = scores.scores.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng::substream(seed, 0);
        logits.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let mut probs = Array2::zeros(logits.dim());
    for (mut out, row) in probs.axis_iter_mut(Axis(0)).zip(logits.axis_iter(Axis(0))) {
        out.assign(&softmax(row));
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn grap_two_groups() {
        let gw = grap_weights(4, 2).unwrap();
        assert_eq!(gw.weights(), &array![[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]);
        assert_eq!(gw.group_width(), 2);
    }

    #[test]
    fn grap_unit_groups_is_identity() {
        let gw = grap_weights(4, 4).unwrap();
        assert_eq!(gw.weights(), &Array2::<f64>::eye(4));
    }

    #[test]
    fn grap_rejects_bad_shapes() {
        assert!(grap_weights(6, 4).is_err());
        assert!(grap_weights(0, 2).is_err());
        assert!(grap_weights(4, 0).is_err());
    }

    #[test]
    fn grap_pools_group_means() {
        let gw = grap_weights(6, 3).unwrap();
        let pooled = gw.pool(array![1.0, 3.0, 5.0, 7.0, -2.0, 2.0].view());
        assert_eq!(pooled, array![2.0, 6.0, 0.0]);
    }

    #[test]
    fn affinity_examples() {
        let gw = grap_weights(4, 2).unwrap();
        let batch = TokenBatch::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        let s = affinity_scores(&batch, gw.view()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.get(0, 0) - h).abs() < 1e-12);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(1, 0) - h).abs() < 1e-12);
        assert!((s.get(1, 1) - h).abs() < 1e-12);
    }

    #[test]
    fn zero_token_is_rejected_with_index() {
        let gw = grap_weights(4, 2).unwrap();
        let batch = TokenBatch::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]]).unwrap();
        match affinity_scores(&batch, gw.view()) {
            Err(Error::ZeroNormToken(1)) => {}
            other => panic!("expected zero-norm error, got {other:?}"),
        }
        let zero_first = TokenBatch::from_rows(&[vec![0.0; 4]]).unwrap();
        assert!(matches!(affinity_scores(&zero_first, gw.view()), Err(Error::ZeroNormToken(0))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let gw = grap_weights(4, 2).unwrap();
        let batch = TokenBatch::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(affinity_scores(&batch, gw.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_tokens_are_rejected() {
        assert!(matches!(
            TokenBatch::from_rows(&[vec![1.0, f64::NAN]]),
            Err(Error::NonFinite { token: 0, feature: 1 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let equal = ScoreMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let p = gate_probabilities(&equal, 0.0, 0).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![0.5, 0.5]);

        // e / (e + 3) and 1 / (e + 3)
        let one_hot = ScoreMatrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = gate_probabilities(&one_hot, 0.0, 0).unwrap();
        let expected = [0.475_366_886_418_671_7, 0.174_877_704_527_109_46, 0.174_877_704_527_109_46, 0.174_877_704_527_109_46];
        for (got, want) in p.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn noisy_gates_are_seed_deterministic() {
        let scores = ScoreMatrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.1, 0.1, 0.1]]).unwrap();
        let a = gate_probabilities(&scores, 0.5, 11).unwrap();
        let b = gate_probabilities(&scores, 0.5, 11).unwrap();
        let c = gate_probabilities(&scores, 0.5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(gate_probabilities(&scores, -1.0, 0).is_err());
    }

    #[test]
    fn score_matrix_rejects_out_of_range() {
        assert!(ScoreMatrix::from_rows(&[vec![1.5]]).is_err());
        assert!(ScoreMatrix::from_rows(&[]).is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..6).prop_flat_map(|s| (Just(s), prop::collection::vec(-5.0f64..5.0, s * 8)))
    }

    proptest! {
        #[test]
        fn grap_rows_are_orthogonal(n in 1usize..7, p in 1usize..6) {
            let gw = grap_weights(n * p, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        prop_assert_eq!(gw.weights().row(i).dot(&gw.weights().row(j)), 0.0);
                    }
                }
            }
        }

        #[test]
        fn scores_are_scale_invariant_and_bounded((s, flat) in batch_strategy(), c in 0.01f64..100.0) {
            prop_assume!(flat.chunks(8).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let gw = grap_weights(8, 4).unwrap();
            let batch = TokenBatch::new(Array2::from_shape_vec((s, 8), flat).unwrap()).unwrap();
            let a = affinity_scores(&batch, gw.view()).unwrap();
            let b = affinity_scores(&batch.scaled(c).unwrap(), gw.view()).unwrap();
            for (x, y) in a.scores().iter().zip(b.scores().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(x.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_keep_argmax(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..8)) {
            let scores = ScoreMatrix::from_rows(&rows).unwrap();
            let probs = gate_probabilities(&scores, 0.0, 0).unwrap();
            for t in 0..scores.s() {
                prop_assert!((probs.row(t).sum() - 1.0).abs() < 1e-12);
                prop_assert_eq!(argmax(probs.row(t)), scores.argmax(t));
            }
        }
    }
}

//! Reference computations for tests.
//!
//! Nothing here calls into `moelab`: every value is computed by plain
//! enumeration or textbook statistics so the tests that use it check the
//! library against an independent route.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Token-choice success probability by enumerating every position of the
/// discriminative token, every class, and every expert assignment of the
/// irrelevant tokens that precede it.
///
/// Assignments are enumerated depth-first over token prefixes, so each prefix
/// stands for all completions of the later (irrelevant to the outcome) tokens.
pub fn tcr_brute_force(s: usize, n: usize, capacity: usize, p: &[f64]) -> f64 {
    assert_eq!(p.len(), n);
    let mut counts = vec![0usize; n];
    let mut total = Sum::default();
    walk(s, n, capacity, p, 0, 1.0, &mut counts, &mut total);
    total.value() / (s * n) as f64
}

/// Neumaier compensated summation; the enumerations add up to millions of
/// tiny terms.
#[derive(Default)]
struct Sum {
    sum: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[allow(clippy::too_many_arguments)]
fn walk(s: usize, n: usize, c: usize, p: &[f64], depth: usize, weight: f64, counts: &mut [usize], total: &mut Sum) {
    // the discriminative token sits at position depth + 1
    for i in 0..n {
        if counts[i] < c {
            total.add(weight * p[i]);
        }
    }
    if depth + 1 == s {
        return;
    }
    for e in 0..n {
        counts[e] += 1;
        walk(s, n, c, p, depth + 1, weight / n as f64, counts, total);
        counts[e] -= 1;
    }
}

/// Expert-choice success probability by enumerating which of the `s - 1`
/// irrelevant tokens outscore the discriminative one.
pub fn ecr_brute_force(s: usize, n: usize, capacity: usize, q: &[f64]) -> f64 {
    assert_eq!(q.len(), n);
    let others = s - 1;
    let mut total = Sum::default();
    for &qi in q {
        for mask in 0u64..(1u64 << others) {
            let k = mask.count_ones() as usize;
            if k < capacity {
                total.add(qi.powi(k as i32) * (1.0 - qi).powi((others - k) as i32));
            }
        }
    }
    total.value() / n as f64
}

/// Binomial(k, r) probabilities by Pascal's rule.
pub fn binomial_pmf(k: usize, r: f64) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..k {
        let mut next = vec![0.0; row.len() + 1];
        for (j, v) in row.iter().enumerate() {
            next[j] += v * (1.0 - r);
            next[j + 1] += v * r;
        }
        row = next;
    }
    row
}

/// Two-sample Kolmogorov-Smirnov test; returns `(D, asymptotic p-value)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Pearson chi-square goodness of fit against the uniform distribution;
/// returns the p-value.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Symmetric eigenvalues by cyclic Jacobi rotations (for small matrices).
pub fn symmetric_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tcr_hand_case() {
        assert!((tcr_brute_force(2, 2, 1, &[0.5, 0.5]) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn ecr_hand_case() {
        assert!((ecr_brute_force(2, 2, 1, &[0.3, 0.3]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pascal_rows_sum_to_one() {
        let row = binomial_pmf(30, 0.2);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!((row[0] - 0.8f64.powi(30)).abs() < 1e-15);
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).1 < 1e-6);
        assert!(ks_two_sample(&a, &a).1 > 0.99);
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        let mut e = symmetric_eigenvalues(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }
}

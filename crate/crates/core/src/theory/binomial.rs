//! Binomial tail probabilities in log space.

/// `P(X <= m)` for `X ~ Binomial(k, r)`.
pub fn cdf(m: u64, k: u64, r: f64) -> f64 {
    if m >= k || r <= 0.0 {
        return 1.0;
    }
    if r >= 1.0 {
        return 0.0;
    }
    if (m as f64) < k as f64 * r {
        lower_tail(m, k, r)
    } else {
        1.0 - upper_tail(m + 1, k, r)
    }
}

/// `P(X >= a)` for `X ~ Binomial(k, r)`.
pub fn sf(a: u64, k: u64, r: f64) -> f64 {
    if a == 0 {
        return 1.0;
    }
    if a > k || r <= 0.0 {
        return 0.0;
    }
    if r >= 1.0 {
        return 1.0;
    }
    if a as f64 > k as f64 * r {
        upper_tail(a, k, r)
    } else {
        1.0 - lower_tail(a - 1, k, r)
    }
}

// Each tail is summed directly on the side of the mean where it is small, so
// it keeps its relative precision and the complement is accurate near 1.
// Terms are generated by the pmf ratio from the end of the support.
fn lower_tail(m: u64, k: u64, r: f64) -> f64 {
    let odds = r.ln() - (-r).ln_1p();
    let mut term = k as f64 * (-r).ln_1p();
    let mut terms = Vec::with_capacity(m as usize + 1);
    for j in 0..=m {
        terms.push(term);
        term += ((k - j) as f64 / (j + 1) as f64).ln() + odds;
    }
    log_sum_exp(terms.iter().copied()).exp().min(1.0)
}

fn upper_tail(a: u64, k: u64, r: f64) -> f64 {
    let odds = (-r).ln_1p() - r.ln();
    let mut term = k as f64 * r.ln();
    let mut terms = Vec::with_capacity((k - a) as usize + 1);
    for j in (a..=k).rev() {
        terms.push(term);
        if j > 0 {
            term += (j as f64 / (k - j + 1) as f64).ln() + odds;
        }
    }
    log_sum_exp(terms.iter().copied()).exp().min(1.0)
}

/// `ln P(X = j)` for `X ~ Binomial(k, r)` with `0 < r < 1`.
pub fn ln_pmf(j: u64, k: u64, r: f64) -> f64 {
    ln_choose(k, j) + j as f64 * r.ln() + (k - j) as f64 * (-r).ln_1p()
}

fn ln_choose(k: u64, j: u64) -> f64 {
    let j = j.min(k - j);
    (0..j).map(|t| ((k - t) as f64 / (t + 1) as f64).ln()).sum()
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `Σ_{j=0}^{len-1} P(Binomial(j, r) <= m)`.
///
/// Walks `j` upwards with `F(j+1) = F(j) - r * pmf(j; m)` and the pmf ratio
/// `pmf(j+1; m) / pmf(j; m) = (j+1)(1-r) / (j+1-m)` kept in log space, so the
/// whole sum costs `O(len)` and does not underflow for large `m`.
pub fn cumulative_cdf_sum(m: u64, len: u64, r: f64) -> f64 {
    if len == 0 {
        return 0.0;
    }
    // F(j) = 1 for j <= m
    let ones = len.min(m + 1);
    if ones == len {
        return len as f64;
    }
    let mut total = ones as f64;
    let ln_r = r.ln();
    let ln_q = (-r).ln_1p();
    // state at j = m: F = 1, pmf(m; m) = r^m
    let mut f = 1.0;
    let mut ln_pmf = m as f64 * ln_r;
    for j in m..len - 1 {
        f = (f - (ln_r + ln_pmf).exp()).max(0.0);
        total += f;
        if f == 0.0 {
            break;
        }
        let next = j + 1;
        ln_pmf += ((next as f64) / ((next - m) as f64)).ln() + ln_q;
    }
    total
}

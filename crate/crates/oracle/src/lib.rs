//! Brute-force reference implementations for the crossfactor test suites.
//!
//! Everything here is deliberately written the slow, obvious way (explicit
//! rank vectors, full peak/trough enumeration, textbook formulas) so it can
//! serve as an independent oracle for the production metric code. This crate
//! is a dev-dependency only and must never share code with the engine.

/// Spearman rank correlation via explicit rank vectors with mean-rank ties,
/// then a textbook Pearson correlation on the ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 3 {
        return None;
    }
    let rx = mean_ranks(xs);
    let ry = mean_ranks(ys);
    pearson(&rx, &ry)
}

/// Mean (fractional) ranks, 1-based; tied values share the average of the
/// positions they occupy.
pub fn mean_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the mean of ranks i+1..=j+1
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Textbook Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Maximum drawdown by enumerating every (peak index, trough index) pair of
/// the wealth curve, peak at or before trough.
pub fn maxdd(wealth: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..wealth.len() {
        for p in 0..=t {
            let dd = wealth[t] / wealth[p] - 1.0;
            if dd < worst {
                worst = dd;
            }
        }
    }
    worst
}

/// Wealth curve from simple returns: V_t = prod(1 + r_tau).
pub fn wealth_curve(returns: &[f64]) -> Vec<f64> {
    let mut v = 1.0;
    returns
        .iter()
        .map(|r| {
            v *= 1.0 + r;
            v
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Annualized mean-to-volatility ratio of a monthly IC series.
pub fn icir(ics: &[f64]) -> Option<f64> {
    if ics.len() < 2 {
        return None;
    }
    let sd = sample_std(ics);
    if sd == 0.0 {
        return None;
    }
    Some(mean(ics) / sd * 12f64.sqrt())
}

/// Annualized Sharpe of a monthly return series.
pub fn sharpe(rs: &[f64]) -> Option<f64> {
    if rs.len() < 2 {
        return None;
    }
    let sd = sample_std(rs);
    if sd == 0.0 {
        return None;
    }
    Some(mean(rs) / sd * 12f64.sqrt())
}

/// Annualized return: 12 x mean monthly return.
pub fn annualized_return(rs: &[f64]) -> f64 {
    12.0 * mean(rs)
}

/// Ending cumulative return as the plain sum of monthly returns.
pub fn cumulative_return_sum(rs: &[f64]) -> f64 {
    rs.iter().sum()
}

/// Weighted mean sum(w*x)/sum(w) over pairs with finite values.
pub fn weighted_mean(pairs: &[(f64, f64)]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(w, x) in pairs {
        num += w * x;
        den += w;
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Quintile bucket sizes for n items: as equal as possible, remainder going
/// to the extremes first (Q1, Q5, Q2, Q4, Q3). Returned low-to-high.
pub fn quintile_sizes(n: usize) -> [usize; 5] {
    let base = n / 5;
    let rem = n % 5;
    let mut sizes = [base; 5];
    // extreme-first remainder order, expressed as 0-based bucket indexes
    let order = [0usize, 4, 1, 3, 2];
    for &b in order.iter().take(rem) {
        sizes[b] += 1;
    }
    sizes
}

/// Quintile membership by ascending value, ties broken by the caller's input
/// order (stable sort). Returns bucket index 0..=4 per item.
pub fn quintile_buckets(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let sizes = quintile_sizes(n);
    let mut buckets = vec![0usize; n];
    let mut pos = 0;
    for (b, &sz) in sizes.iter().enumerate() {
        for _ in 0..sz {
            buckets[order[pos]] = b;
            pos += 1;
        }
    }
    buckets
}

/// Linear-interpolation quantile of a sample (q in [0,1]).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = q * (s.len() as f64 - 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        s[lo]
    } else {
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    }
}

/// One-sample Kolmogorov-Smirnov test against Uniform(0,1).
/// Returns (D statistic, asymptotic p-value via the Kolmogorov series with
/// the Stephens small-sample correction).
pub fn ks_uniform(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let hi = (i + 1) as f64 / n as f64 - cdf;
        let lo = cdf - i as f64 / n as f64;
        d = d.max(hi).max(lo);
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    (d, p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_value() {
        // 4-point example: ranks (1,2,3,4) vs (1,3,2,4), rho = 0.8
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 30.0, 20.0, 40.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn maxdd_enumerates_pairs() {
        let v = wealth_curve(&[0.10, -0.10, 0.20]);
        assert!((maxdd(&v) - (0.99 / 1.1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn quintile_sizes_remainder_to_extremes() {
        assert_eq!(quintile_sizes(10), [2, 2, 2, 2, 2]);
        assert_eq!(quintile_sizes(7), [2, 1, 1, 1, 2]);
        assert_eq!(quintile_sizes(8), [2, 2, 1, 1, 2]);
        assert_eq!(quintile_sizes(9), [2, 2, 1, 2, 2]);
    }

    #[test]
    fn ks_uniform_sane() {
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 + 0.5) / 20.0).collect();
        let (d, p) = ks_uniform(&xs);
        assert!(d < 0.05);
        assert!(p > 0.99);
    }
}

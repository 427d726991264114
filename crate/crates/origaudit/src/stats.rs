//! Small statistics helpers for the experiment assertions.

/// Abramowitz–Stegun 7.1.26 erf approximation (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// One-sided upper Wilson score bound for a binomial proportion.
pub fn wilson_upper(successes: usize, trials: usize, z: f64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let margin = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center + margin) / denom).min(1.0)
}

/// One-sided two-proportion z-test p-value for H1: p1 > p2.
/// Returns 1.0 when the pooled variance vanishes (no evidence either way).
pub fn two_proportion_p_greater(k1: usize, n1: usize, k2: usize, n2: usize) -> f64 {
    if n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let p1 = k1 as f64 / n1 as f64;
    let p2 = k2 as f64 / n2 as f64;
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    if var <= 0.0 {
        return 1.0;
    }
    let z = (p1 - p2) / var.sqrt();
    1.0 - normal_cdf(z)
}

/// Median of a sample (mean of middle pair for even sizes). NaN on empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-sided sign-test p-value for H1: the paired differences `a[i] - b[i]`
/// are typically negative (i.e. `a < b`). Ties are dropped.
pub fn sign_test_p_less(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut n = 0usize;
    let mut wins = 0usize; // a[i] < b[i]
    for (&x, &y) in a.iter().zip(b) {
        if x < y {
            wins += 1;
            n += 1;
        } else if x > y {
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    // P(X >= wins) for X ~ Binomial(n, 1/2).
    let mut p = 0.0;
    for k in wins..=n {
        p += binom_pmf_half(n, k);
    }
    p.min(1.0)
}

fn binom_pmf_half(n: usize, k: usize) -> f64 {
    // C(n,k) / 2^n computed in log space for stability.
    let ln = |m: usize| -> f64 { (1..=m).map(|i| (i as f64).ln()).sum() };
    let log_c = ln(n) - ln(k) - ln(n - k);
    (log_c - n as f64 * std::f64::consts::LN_2).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.6448536) - 0.95).abs() < 1e-4);
        assert!((normal_cdf(-1.96) - 0.025).abs() < 1e-4);
    }

    #[test]
    fn wilson_upper_zero_successes_shrinks_with_n() {
        let u10 = wilson_upper(0, 10, 1.6448536);
        let u1000 = wilson_upper(0, 1000, 1.6448536);
        assert!(u1000 < u10);
        assert!(u1000 < 0.005);
        assert_eq!(wilson_upper(0, 0, 1.6448536), 1.0);
    }

    #[test]
    fn two_proportion_detects_a_large_gap() {
        let p = two_proportion_p_greater(80, 400, 5, 400);
        assert!(p < 1e-6);
        let p_tie = two_proportion_p_greater(0, 400, 0, 400);
        assert_eq!(p_tie, 1.0);
    }

    #[test]
    fn median_and_sign_test() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        let a = [0.1, 0.2, 0.15, 0.3, 0.1, 0.2, 0.1, 0.25];
        let b = [0.5, 0.6, 0.55, 0.7, 0.5, 0.6, 0.5, 0.65];
        assert!(sign_test_p_less(&a, &b) < 0.01);
        assert!(sign_test_p_less(&b, &a) > 0.99);
    }
}

#![allow(dead_code)]

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and the uniform distribution on `[lo, hi]`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[test]
fn ks_detects_skew() {
    let uniform: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
    assert!(ks_uniform(&uniform, 0.0, 1.0) < ks_critical_1pct(1000));
    let skewed: Vec<f64> = uniform.iter().map(|x| x * x).collect();
    assert!(ks_uniform(&skewed, 0.0, 1.0) > ks_critical_1pct(1000));
}

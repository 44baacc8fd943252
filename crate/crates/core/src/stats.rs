//! Small statistics toolbox: moments, quartiles, a one-sample KS test and
//! correlation utilities used by the simulator checks and the benchmark.

/// Arithmetic mean. Returns 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Linear-interpolation quantile (the common "type 7" definition).
/// `q` in [0, 1]; input need not be sorted.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let w = pos - lo as f64;
        v[lo] * (1.0 - w) + v[hi] * w
    }
}

/// Five-number summary plus mean, used for score-distribution reporting.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistributionSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl DistributionSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        assert!(!xs.is_empty(), "summary of empty sample");
        DistributionSummary {
            min: quantile(xs, 0.0),
            q1: quantile(xs, 0.25),
            median: quantile(xs, 0.5),
            q3: quantile(xs, 0.75),
            max: quantile(xs, 1.0),
            mean: mean(xs),
            count: xs.len(),
        }
    }
}

/// One-sample Kolmogorov–Smirnov statistic against the uniform CDF on
/// [lo, hi].
pub fn ks_statistic_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    assert!(!samples.is_empty() && hi > lo);
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let upper = (i as f64 + 1.0) / n - f;
        let lower = f - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    d
}

/// Large-sample KS critical value at significance `alpha` (0.01 or 0.05).
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    let c = if alpha <= 0.01 { 1.628 } else { 1.358 };
    c / (n as f64).sqrt()
}

/// Lag of the maximum Pearson cross-correlation between `x` and `y` over
/// non-negative lags, where lag `l` aligns `x[t]` with `y[t + l]`. A series
/// `y` that is `x` delayed by `d` peaks at lag `d`.
pub fn cross_correlation_argmax(x: &[f64], y: &[f64], max_lag: usize) -> usize {
    assert_eq!(x.len(), y.len());
    assert!(x.len() > max_lag + 2);
    let mut best = (0usize, f64::NEG_INFINITY);
    for lag in 0..=max_lag {
        let n = x.len() - lag;
        let xs = &x[..n];
        let ys = &y[lag..];
        let mx = mean(xs);
        let my = mean(ys);
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for i in 0..n {
            let a = xs[i] - mx;
            let b = ys[i] - my;
            num += a * b;
            dx += a * a;
            dy += b * b;
        }
        let denom = (dx * dy).sqrt();
        let r = if denom > 0.0 { num / denom } else { 0.0 };
        if r > best.1 {
            best = (lag, r);
        }
    }
    best.0
}

/// Sample autocorrelation at a single lag.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    assert!(x.len() > lag + 2);
    let m = mean(x);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        let d = x[i] - m;
        den += d * d;
        if i + lag < x.len() {
            num += d * (x[i + lag] - m);
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Lag in `[lo, hi]` minimizing the autocorrelation. For an alternating
/// two-level signal this sits near the mean dwell time of one level.
pub fn autocorrelation_argmin(x: &[f64], lo: usize, hi: usize) -> usize {
    assert!(lo < hi);
    let mut best = (lo, f64::INFINITY);
    for lag in lo..=hi {
        let r = autocorrelation(x, lag);
        if r < best.1 {
            best = (lag, r);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!((quantile(&xs, 0.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ks_accepts_true_uniform_and_rejects_shifted() {
        use rand::Rng;
        let mut rng = crate::rng::substream(1, crate::rng::StreamDomain::Trace, 0);
        let samples: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d = ks_statistic_uniform(&samples, 0.0, 1.0);
        assert!(d < ks_critical(0.01, samples.len()), "d = {d}");
        let skewed: Vec<f64> = samples.iter().map(|x| x * x).collect();
        let d2 = ks_statistic_uniform(&skewed, 0.0, 1.0);
        assert!(d2 > ks_critical(0.01, skewed.len()));
    }

    #[test]
    fn cross_correlation_finds_delay() {
        use rand::Rng;
        let mut rng = crate::rng::substream(2, crate::rng::StreamDomain::Trace, 0);
        let base: Vec<f64> = (0..5000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth: Vec<f64> = base
            .windows(16)
            .map(|w| w.iter().sum::<f64>() / 16.0)
            .collect();
        let delayed: Vec<f64> = (0..smooth.len())
            .map(|t| if t >= 13 { smooth[t - 13] } else { smooth[0] })
            .collect();
        assert_eq!(cross_correlation_argmax(&smooth, &delayed, 40), 13);
    }
}

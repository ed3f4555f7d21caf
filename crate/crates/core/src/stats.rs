//! Small statistical helpers shared by the density gate, the coupling
//! significance test and the statement analytics.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Asymptotic Kolmogorov distribution `P(sqrt(n) D_n <= x)`.
pub fn kolmogorov_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < 0.2 {
        // Alternating series converges poorly here; the value is below 1e-20.
        return 0.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * x * x).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (1.0 - 2.0 * sum).clamp(0.0, 1.0)
}

/// `k(alpha)` such that `P(sqrt(n) D_n > k) = alpha` asymptotically.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.2, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsOneSample {
    pub statistic: f64,
    pub critical: f64,
    pub passed: bool,
}

/// One-sample Kolmogorov test of `sample` against `cdf`, using the asymptotic
/// critical value with Stephens' finite-sample correction.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> KsOneSample {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let critical = kolmogorov_critical(alpha) / (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    KsOneSample {
        statistic: d,
        critical,
        passed: d < critical,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Smallest `|r|` significant at two-sided level `alpha` with `n` pairs.
pub fn correlation_critical(n: usize, alpha: f64) -> f64 {
    if n < 3 {
        return f64::INFINITY;
    }
    let df = (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .inverse_cdf(1.0 - alpha / 2.0);
    t / (t * t + df).sqrt()
}

//! Deposit shares across symbols maximizing `J = n.x + beta n^T R n` on the
//! simplex, from closed-trade statistics.

use crate::stats::{mean, pearson};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PortfolioError {
    #[error("no symbol has at least 2 closed trades")]
    InsufficientData,
    #[error("statistics contain non-finite values")]
    NonFinite,
    #[error("dimension mismatch: x has {x}, R has {r} entries")]
    Dimension { x: usize, r: usize },
}

/// One closed trade as seen by the allocator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfitSample {
    /// Index of the symbol in the run.
    pub symbol: usize,
    /// Close time, epoch seconds.
    pub close_time: i64,
    pub net: f64,
    /// Balance when the position was opened.
    pub balance_at_open: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfitStats {
    /// Run indices of the included symbols, ascending.
    pub symbols: Vec<usize>,
    pub x: Vec<f64>,
    /// Row-major correlation matrix over the included symbols.
    pub r: Vec<f64>,
    pub n_trades: Vec<usize>,
}

impl ProfitStats {
    pub fn new(x: Vec<f64>, r: Vec<f64>) -> Result<Self, PortfolioError> {
        if r.len() != x.len() * x.len() {
            return Err(PortfolioError::Dimension { x: x.len(), r: r.len() });
        }
        let n = x.len();
        Ok(Self {
            symbols: (0..n).collect(),
            n_trades: vec![0; n],
            x,
            r,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Per-symbol mean balance-normalized return and bucketed correlations.
/// Symbols with fewer than 2 trades are left out. Bucket returns are sums of
/// normalized nets closed within `bucket_secs`; a pair's correlation uses the
/// buckets where both traded and is 0 when undefined.
pub fn estimate_profit_stats(trades: &[ProfitSample], bucket_secs: i64) -> Result<ProfitStats, PortfolioError> {
    let mut per: BTreeMap<usize, Vec<&ProfitSample>> = BTreeMap::new();
    for t in trades {
        per.entry(t.symbol).or_default().push(t);
    }
    per.retain(|_, v| v.len() >= 2);
    if per.is_empty() {
        return Err(PortfolioError::InsufficientData);
    }
    let bucket = bucket_secs.max(1);
    let mut symbols = Vec::new();
    let mut x = Vec::new();
    let mut n_trades = Vec::new();
    let mut buckets: Vec<BTreeMap<i64, f64>> = Vec::new();
    for (sym, ts) in &per {
        let rets: Vec<f64> = ts.iter().map(|t| t.net / t.balance_at_open).collect();
        symbols.push(*sym);
        x.push(mean(&rets));
        n_trades.push(ts.len());
        let mut b: BTreeMap<i64, f64> = BTreeMap::new();
        for (t, r) in ts.iter().zip(&rets) {
            *b.entry(t.close_time.div_euclid(bucket)).or_default() += r;
        }
        buckets.push(b);
    }
    let k = symbols.len();
    let mut r = vec![0.0; k * k];
    for i in 0..k {
        r[i * k + i] = 1.0;
        for j in i + 1..k {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (key, vi) in &buckets[i] {
                if let Some(vj) = buckets[j].get(key) {
                    a.push(*vi);
                    b.push(*vj);
                }
            }
            let c = if a.len() >= 3 { pearson(&a, &b).unwrap_or(0.0) } else { 0.0 };
            r[i * k + j] = c;
            r[j * k + i] = c;
        }
    }
    if x.iter().chain(&r).any(|v| !v.is_finite()) {
        return Err(PortfolioError::NonFinite);
    }
    Ok(ProfitStats { symbols, x, r, n_trades })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub n: Vec<f64>,
    pub j: f64,
    pub beta: f64,
    /// Best `J` of the step-0.01 simplex grid, computed for up to 3 symbols.
    pub grid_j: Option<f64>,
}

pub fn objective(x: &[f64], r: &[f64], beta: f64, n: &[f64]) -> f64 {
    let k = x.len();
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += n[i] * n[j] * r[i * k + j];
        }
    }
    n.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + beta * quad
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|vi| (vi - theta).max(0.0)).collect()
}

fn ascend(x: &[f64], r: &[f64], beta: f64, start: Vec<f64>) -> Vec<f64> {
    let k = x.len();
    // Lipschitz bound of the gradient: 2 |beta| max row sum of |R|.
    let lip = 2.0
        * beta.abs()
        * (0..k)
            .map(|i| (0..k).map(|j| r[i * k + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
    let step = 1.0 / lip.max(1e-3);
    let mut n = start;
    for _ in 0..20_000 {
        let grad: Vec<f64> = (0..k)
            .map(|i| x[i] + 2.0 * beta * (0..k).map(|j| r[i * k + j] * n[j]).sum::<f64>())
            .collect();
        let next = project_simplex(&n.iter().zip(&grad).map(|(a, g)| a + step * g).collect::<Vec<_>>());
        let moved = next.iter().zip(&n).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        n = next;
        if moved < 1e-15 {
            break;
        }
    }
    n
}

/// Best `J` over the simplex grid with `1/steps` spacing.
pub fn grid_search(x: &[f64], r: &[f64], beta: f64, steps: usize) -> (Vec<f64>, f64) {
    let k = x.len();
    let mut best = (vec![0.0; k], f64::NEG_INFINITY);
    let mut counts = vec![0usize; k];
    fn rec(i: usize, left: usize, counts: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if i + 1 == counts.len() {
            counts[i] = left;
            f(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, counts, f);
        }
    }
    let mut visit = |c: &[usize]| {
        let n: Vec<f64> = c.iter().map(|v| *v as f64 / steps as f64).collect();
        let j = objective(x, r, beta, &n);
        if j > best.1 {
            best = (n, j);
        }
    };
    if k > 0 {
        rec(0, steps, &mut counts, &mut visit);
    }
    best
}

/// Maximizes `J` over the simplex: projected gradient ascent from the
/// barycentre and from every vertex, plus the exact optimum along every edge.
pub fn allocate(stats: &ProfitStats, beta: f64) -> Result<Allocation, PortfolioError> {
    let (x, r) = (&stats.x, &stats.r);
    let k = x.len();
    if r.len() != k * k {
        return Err(PortfolioError::Dimension { x: k, r: r.len() });
    }
    if k == 0 {
        return Err(PortfolioError::InsufficientData);
    }
    if !beta.is_finite() || x.iter().chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(PortfolioError::NonFinite);
    }
    let mut candidates: Vec<Vec<f64>> = vec![vec![1.0 / k as f64; k]];
    for i in 0..k {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        candidates.push(v);
    }
    let starts = candidates.clone();
    for s in starts {
        candidates.push(ascend(x, r, beta, s));
    }
    // Along edge t e_i + (1 - t) e_j, J is quadratic in t.
    for i in 0..k {
        for j in i + 1..k {
            let a = beta * (r[i * k + i] + r[j * k + j] - 2.0 * r[i * k + j]);
            let b = x[i] - x[j] + 2.0 * beta * (r[i * k + j] - r[j * k + j]);
            if a < 0.0 {
                let t = -b / (2.0 * a);
                if t > 0.0 && t < 1.0 {
                    let mut v = vec![0.0; k];
                    v[i] = t;
                    v[j] = 1.0 - t;
                    candidates.push(v);
                }
            }
        }
    }
    let mut best = candidates[0].clone();
    let mut best_j = objective(x, r, beta, &best);
    for c in candidates.into_iter().skip(1) {
        let j = objective(x, r, beta, &c);
        if j > best_j {
            best_j = j;
            best = c;
        }
    }
    let grid_j = (k <= 3).then(|| grid_search(x, r, beta, 100).1);
    Ok(Allocation {
        n: best,
        j: best_j,
        beta,
        grid_j,
    })
}

/// Shares for all `k` symbols: each symbol without statistics keeps `1/k`;
/// the allocation is scaled into the remainder.
pub fn full_shares(stats: &ProfitStats, alloc: &Allocation, k: usize) -> Vec<f64> {
    let excluded = k - stats.symbols.len();
    let rest = 1.0 - excluded as f64 / k as f64;
    let mut out = vec![1.0 / k as f64; k];
    for (pos, sym) in stats.symbols.iter().enumerate() {
        out[*sym] = rest * alloc.n[pos];
    }
    out
}

pub fn rebalance_trigger(closed_since_last: usize, elapsed_bars: usize, n_min: usize, t_max: usize) -> bool {
    closed_since_last >= n_min || elapsed_bars >= t_max
}

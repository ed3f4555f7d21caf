//! Fusion of elementary votes into `U_k`, weight adaptation against the
//! realized direction, compensation, correlation coupling into `S_k` and the
//! per-symbol activity state machine.

use crate::stats::{correlation_critical, pearson};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("dimension mismatch: vector {got}, matrix {want}")]
    Dimension { want: usize, got: usize },
    #[error("need at least 3 aligned observations, got {0}")]
    TooShort(usize),
}

fn dot(u: &[i8], w: &[f64]) -> f64 {
    u.iter().zip(w).map(|(u, w)| *u as f64 * w).sum()
}

/// `tanh(w . u)`.
pub fn fuse(u: &[i8], weights: &[f64]) -> Result<f64, AssemblyError> {
    if u.len() != weights.len() {
        return Err(AssemblyError::Length(u.len(), weights.len()));
    }
    Ok(dot(u, weights).tanh())
}

/// `(a - tanh(w . u))^2`.
pub fn fusion_loss(weights: &[f64], u: &[i8], a: i8) -> f64 {
    (a as f64 - dot(u, weights).tanh()).powi(2)
}

/// Gradient of [`fusion_loss`] in the weights.
pub fn fusion_gradient(weights: &[f64], u: &[i8], a: i8) -> Vec<f64> {
    let big_u = dot(u, weights).tanh();
    u.iter()
        .map(|ui| -2.0 * (a as f64 - big_u) * (1.0 - big_u * big_u) * *ui as f64)
        .collect()
}

/// One descent step on [`fusion_loss`]:
/// `w_i += 2 beta_w (A - U)(1 - U^2) u_i`.
pub fn adapt_weights(weights: &[f64], u: &[i8], a: i8, beta_w: f64) -> Vec<f64> {
    let big_u = dot(u, weights).tanh();
    let g = 2.0 * beta_w * (a as f64 - big_u) * (1.0 - big_u * big_u);
    weights.iter().zip(u).map(|(w, ui)| w + g * *ui as f64).collect()
}

pub fn apply_compensation(u: f64, forecast_correct: bool, compensation: f64) -> f64 {
    if forecast_correct {
        u
    } else {
        compensation * u
    }
}

/// Pairwise quotation correlations with a 5% significance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    pub k: usize,
    /// Row-major `k x k`.
    pub lambda: Vec<f64>,
    pub significant: Vec<bool>,
    pub window: usize,
}

impl CouplingMatrix {
    pub fn identity(k: usize) -> Self {
        let mut lambda = vec![0.0; k * k];
        let mut significant = vec![false; k * k];
        for i in 0..k {
            lambda[i * k + i] = 1.0;
            significant[i * k + i] = true;
        }
        Self { k, lambda, significant, window: 0 }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lambda[i * self.k + j]
    }

    /// Entry as used for coupling: diagonal 1, insignificant entries 0.
    pub fn masked(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else if self.significant[i * self.k + j] {
            self.lambda[i * self.k + j]
        } else {
            0.0
        }
    }

    fn from_correlations(k: usize, n: usize, window: usize, corr: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let crit = correlation_critical(n, 0.05);
        let mut m = Self::identity(k);
        m.window = window;
        for i in 0..k {
            for j in i + 1..k {
                let r = corr(i, j);
                let v = r.unwrap_or(0.0);
                let sig = r.is_some_and(|r| r.abs() >= crit);
                for (a, b) in [(i, j), (j, i)] {
                    m.lambda[a * k + b] = v;
                    m.significant[a * k + b] = sig;
                }
            }
        }
        m
    }
}

/// Pearson correlations over the trailing `window` observations of each
/// aligned return sequence. Zero-variance pairs get 0, not significant.
pub fn update_coupling(returns: &[Vec<f64>], window: usize) -> Result<CouplingMatrix, AssemblyError> {
    let k = returns.len();
    let len = returns.first().map_or(0, Vec::len);
    if let Some(bad) = returns.iter().find(|r| r.len() != len) {
        return Err(AssemblyError::Length(len, bad.len()));
    }
    let n = window.min(len);
    if n < 3 {
        return Err(AssemblyError::TooShort(n));
    }
    let tail: Vec<&[f64]> = returns.iter().map(|r| &r[len - n..]).collect();
    Ok(CouplingMatrix::from_correlations(k, n, window, |i, j| pearson(tail[i], tail[j])))
}

/// Trailing-window coupling maintained from running sums; exact sums are
/// recomputed every `window` pushes so rounding drift stays bounded.
#[derive(Debug, Clone)]
pub struct RollingCoupling {
    k: usize,
    window: usize,
    buf: VecDeque<Vec<f64>>,
    sum: Vec<f64>,
    cross: Vec<f64>,
    since_exact: usize,
}

impl RollingCoupling {
    pub fn new(k: usize, window: usize) -> Self {
        Self {
            k,
            window: window.max(3),
            buf: VecDeque::with_capacity(window + 1),
            sum: vec![0.0; k],
            cross: vec![0.0; k * k],
            since_exact: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn accumulate(&mut self, x: &[f64], sign: f64) {
        let k = self.k;
        for i in 0..k {
            self.sum[i] += sign * x[i];
            for j in i..k {
                self.cross[i * k + j] += sign * x[i] * x[j];
            }
        }
    }

    pub fn push(&mut self, x: Vec<f64>) {
        assert_eq!(x.len(), self.k);
        self.accumulate(&x, 1.0);
        self.buf.push_back(x);
        if self.buf.len() > self.window {
            let old = self.buf.pop_front().expect("non-empty");
            self.accumulate(&old, -1.0);
        }
        self.since_exact += 1;
        if self.since_exact >= self.window {
            self.since_exact = 0;
            self.sum.iter_mut().for_each(|v| *v = 0.0);
            self.cross.iter_mut().for_each(|v| *v = 0.0);
            let rows: Vec<Vec<f64>> = self.buf.iter().cloned().collect();
            for r in &rows {
                self.accumulate(r, 1.0);
            }
        }
    }

    /// `None` until three observations are in.
    pub fn matrix(&self) -> Option<CouplingMatrix> {
        let n = self.buf.len();
        if n < 3 {
            return None;
        }
        let k = self.k;
        let nf = n as f64;
        let cov = |i: usize, j: usize| {
            let (a, b) = (i.min(j), i.max(j));
            self.cross[a * k + b] - self.sum[a] * self.sum[b] / nf
        };
        Some(CouplingMatrix::from_correlations(k, n, self.window, |i, j| {
            let (vi, vj) = (cov(i, i), cov(j, j));
            let scale = 1e-12 * (self.cross[i * k + i] + self.cross[j * k + j]).max(f64::MIN_POSITIVE);
            if vi <= scale || vj <= scale {
                None
            } else {
                Some((cov(i, j) / (vi * vj).sqrt()).clamp(-1.0, 1.0))
            }
        }))
    }
}

/// `S = Lambda_masked U`.
pub fn couple(u: &[f64], cm: &CouplingMatrix) -> Result<Vec<f64>, AssemblyError> {
    if u.len() != cm.k {
        return Err(AssemblyError::Dimension { want: cm.k, got: u.len() });
    }
    Ok((0..cm.k)
        .map(|i| (0..cm.k).map(|j| cm.masked(i, j) * u[j]).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    /// Trades.
    Active,
    /// Takes part in coupling and adaptation, emits no orders.
    SemiActive,
    /// Disconnected.
    Passive,
}

pub fn block_state(accuracy: f64) -> BlockState {
    if accuracy > 0.5 {
        BlockState::Active
    } else if accuracy >= 0.25 {
        BlockState::SemiActive
    } else {
        BlockState::Passive
    }
}

/// Ring of the last `W` forecast outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyWindow {
    cap: usize,
    ring: VecDeque<bool>,
    correct: usize,
}

impl AccuracyWindow {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            ring: VecDeque::with_capacity(cap.max(1)),
            correct: 0,
        }
    }

    pub fn record(&mut self, correct: bool) {
        self.ring.push_back(correct);
        self.correct += correct as usize;
        if self.ring.len() > self.cap {
            let old = self.ring.pop_front().expect("non-empty");
            self.correct -= old as usize;
        }
    }

    /// Share of correct forecasts; 0.5 while empty.
    pub fn accuracy(&self) -> f64 {
        if self.ring.is_empty() {
            0.5
        } else {
            self.correct as f64 / self.ring.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }
}

/// Outcome of comparing a forecast with the realized change; `None` when
/// either is zero.
pub fn forecast_outcome(u: f64, realized: f64) -> Option<bool> {
    if u == 0.0 || realized == 0.0 {
        None
    } else {
        Some((u > 0.0) == (realized > 0.0))
    }
}

/// Per-symbol fusion weights, compensation and accuracy tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub weights: Vec<Vec<f64>>,
    pub beta_w: f64,
    pub compensation: f64,
    pub windows: Vec<AccuracyWindow>,
    /// Whether the last scored forecast per symbol was right.
    pub last_correct: Vec<bool>,
}

impl FusionState {
    pub fn new(symbols: usize, blocks: usize, w0: f64, beta_w: f64, compensation: f64, window: usize) -> Self {
        Self {
            weights: vec![vec![w0; blocks]; symbols],
            beta_w,
            compensation,
            windows: vec![AccuracyWindow::new(window); symbols],
            last_correct: vec![true; symbols],
        }
    }

    /// `U_k` after compensation for the previous outcome.
    pub fn fused(&self, symbol: usize, u: &[i8]) -> f64 {
        let raw = dot(u, &self.weights[symbol]).tanh();
        apply_compensation(raw, self.last_correct[symbol], self.compensation)
    }

    /// Weight step against the realized direction `a`; no-op when `a == 0`.
    pub fn adapt(&mut self, symbol: usize, u: &[i8], a: i8) {
        if a != 0 {
            self.weights[symbol] = adapt_weights(&self.weights[symbol], u, a, self.beta_w);
        }
    }

    /// Scores the previous bar's forecast against the realized change.
    pub fn score(&mut self, symbol: usize, forecast: f64, realized: f64) {
        if let Some(ok) = forecast_outcome(forecast, realized) {
            self.windows[symbol].record(ok);
            self.last_correct[symbol] = ok;
        }
    }

    pub fn state(&self, symbol: usize) -> BlockState {
        block_state(self.windows[symbol].accuracy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[1, -1, 1], &[0.0; 3]).unwrap(), 0.0);
        assert!((fuse(&[1], &[1.0]).unwrap() - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!(fuse(&[1, 0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn fuse_is_odd(u in prop::collection::vec(-1i8..=1, 1..6), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = u.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let neg: Vec<i8> = u.iter().map(|x| -x).collect();
            prop_assert_eq!(fuse(&neg, &w).unwrap(), -fuse(&u, &w).unwrap());
        }

        #[test]
        fn fuse_monotone_in_weighted_coordinate(w in prop::collection::vec(-2.0f64..2.0, 3), i in 0usize..3) {
            let mut lo = vec![0i8; 3];
            let mut hi = vec![0i8; 3];
            lo[i] = -1;
            hi[i] = 1;
            let (a, b) = (fuse(&lo, &w).unwrap(), fuse(&hi, &w).unwrap());
            if w[i] > 0.0 { prop_assert!(b >= a) } else { prop_assert!(b <= a) }
        }

        #[test]
        fn coupling_is_linear(u in prop::collection::vec(-1.0f64..1.0, 3), c in 0.01f64..1.0) {
            let mut cm = CouplingMatrix::identity(3);
            cm.lambda[1] = 0.4; cm.lambda[3] = 0.4; cm.significant[1] = true; cm.significant[3] = true;
            let s = couple(&u, &cm).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
            let sc = couple(&scaled, &cm).unwrap();
            for (a, b) in s.iter().zip(&sc) { prop_assert!((c * a - b).abs() < 1e-12); }
        }
    }

    #[test]
    fn adapt_examples() {
        assert_eq!(adapt_weights(&[0.3, -0.2], &[0, 0], 1, 0.1), vec![0.3, -0.2]);
        let w = adapt_weights(&[0.0], &[1], 1, 0.1);
        assert!((w[0] - 0.2).abs() < 1e-15);
        let mut w = vec![0.0];
        let mut last_u = 0.0;
        for _ in 0..1000 {
            let next = adapt_weights(&w, &[1], 1, 0.1);
            assert!(next[0] > w[0]);
            w = next;
            let u = fuse(&[1], &w).unwrap();
            assert!(u > last_u && u < 1.0);
            last_u = u;
        }
        assert!(last_u > 0.95);
    }

    #[test]
    fn adapt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u: Vec<i8> = (0..n).map(|_| rng.random_range(-1..=1)).collect();
            let a = if rng.random::<bool>() { 1 } else { -1 };
            let g = fusion_gradient(&w, &u, a);
            let beta = 0.05;
            let step = adapt_weights(&w, &u, a, beta);
            for i in 0..n {
                let h = 1e-6;
                let mut up = w.clone();
                up[i] += h;
                let mut dn = w.clone();
                dn[i] -= h;
                let fd = (fusion_loss(&up, &u, a) - fusion_loss(&dn, &u, a)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "{fd} {}", g[i]);
                assert!((step[i] - (w[i] - beta * g[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compensation_examples() {
        assert_eq!(apply_compensation(0.8, true, 0.5), 0.8);
        assert_eq!(apply_compensation(0.8, false, 0.5), 0.4);
        assert_eq!(apply_compensation(0.0, false, 0.5), 0.0);
    }

    #[test]
    fn coupling_examples() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cm = update_coupling(&[x.clone(), x.clone(), neg], 50).unwrap();
        assert!((cm.get(0, 1) - 1.0).abs() < 1e-12 && cm.significant[1]);
        assert!((cm.get(0, 2) + 1.0).abs() < 1e-12 && cm.significant[2]);
        assert!(matches!(update_coupling(&[vec![1.0, 2.0]], 10), Err(AssemblyError::TooShort(2))));
    }

    #[test]
    fn independent_streams_rarely_significant() {
        let crit = correlation_critical(100, 0.05);
        assert!((crit - 0.197).abs() < 1e-3);
        let mut below = 0;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
            let cm = update_coupling(&[a, b], 100).unwrap();
            if cm.get(0, 1).abs() < 0.197 {
                below += 1;
            }
        }
        // 0.197 is the 5% critical value itself, so the expected share is 95%;
        // allow three binomial standard deviations (about 21 of 1000).
        assert!(below >= 929, "{below}");
    }

    #[test]
    fn couple_examples() {
        let id = CouplingMatrix::identity(3);
        assert_eq!(couple(&[0.3, -0.1, 0.9], &id).unwrap(), vec![0.3, -0.1, 0.9]);
        let mut cm = CouplingMatrix::identity(2);
        cm.lambda[1] = 0.8;
        cm.lambda[2] = 0.8;
        cm.significant[1] = true;
        cm.significant[2] = true;
        let s = couple(&[1.0, -1.0], &cm).unwrap();
        assert!((s[0] - 0.2).abs() < 1e-15 && (s[1] + 0.2).abs() < 1e-15);
        cm.lambda[1] = -0.8;
        cm.lambda[2] = -0.8;
        let s = couple(&[1.0, -1.0], &cm).unwrap();
        assert!((s[0] - 1.8).abs() < 1e-15 && (s[1] + 1.8).abs() < 1e-15);
        cm.significant[1] = false;
        cm.significant[2] = false;
        assert_eq!(couple(&[1.0, -1.0], &cm).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(couple(&[1.0], &cm), Err(AssemblyError::Dimension { .. })));
    }

    #[test]
    fn rolling_coupling_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 3;
        let window = 40;
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut roll = RollingCoupling::new(k, window);
        for t in 0..500 {
            let z: f64 = rng.sample(StandardNormal);
            let row: Vec<f64> = (0..k)
                .map(|i| 1e-4 * (z * (i as f64 - 1.0) + rng.sample::<f64, _>(StandardNormal)))
                .collect();
            for i in 0..k {
                cols[i].push(row[i]);
            }
            roll.push(row);
            if t >= 2 {
                let batch = update_coupling(&cols, window).unwrap();
                let inc = roll.matrix().unwrap();
                for i in 0..k * k {
                    assert!((batch.lambda[i] - inc.lambda[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn state_thresholds() {
        assert_eq!(block_state(0.6), BlockState::Active);
        assert_eq!(block_state(0.3), BlockState::SemiActive);
        assert_eq!(block_state(0.1), BlockState::Passive);
        assert_eq!(block_state(0.5), BlockState::SemiActive);
        assert_eq!(block_state(0.25), BlockState::SemiActive);
        assert_eq!(block_state(0.500_000_001), BlockState::Active);
        assert_eq!(block_state(0.249_999_999), BlockState::Passive);
    }

    #[test]
    fn accuracy_window_rolls() {
        let mut w = AccuracyWindow::new(4);
        assert_eq!(w.accuracy(), 0.5);
        for ok in [true, true, true, false, false, false] {
            w.record(ok);
        }
        assert_eq!(w.len(), 4);
        assert_eq!(w.accuracy(), 0.25);
        assert_eq!(forecast_outcome(0.0, 1.0), None);
        assert_eq!(forecast_outcome(0.4, -1.0), Some(false));
    }

    #[test]
    fn fusion_state_compensates_after_a_miss() {
        let mut fs = FusionState::new(1, 1, 1.0, 0.1, 0.5, 100);
        let u = fs.fused(0, &[1]);
        assert!((u - 1f64.tanh()).abs() < 1e-15);
        fs.score(0, u, -0.001);
        assert!((fs.fused(0, &[1]) - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert_eq!(fs.state(0), BlockState::Passive);
    }
}

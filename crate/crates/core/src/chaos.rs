//! Small-mode deterministic chaos screen: fit lag maps
//! `X_{n+1} = f(X_n, ..., X_{n-Q+1})` by least squares, locate their fixed
//! points and check whether any of them is hyperbolic.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const MAX_LAG: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum ChaosError {
    #[error("lag order {0} outside 1..={MAX_LAG}")]
    Lag(usize),
    #[error("state left the map's domain at step {step}")]
    Domain { step: usize },
    #[error("need more than {need} samples, got {got}")]
    Length { need: usize, got: usize },
    #[error("design matrix is rank deficient (condition {cond:e})")]
    Rank { cond: f64 },
}

/// Multivariate polynomial in the lag vector `(x_n, x_{n-1}, ...)` with all
/// monomials of total degree `<= degree`, in graded lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct MapModel {
    pub lag: usize,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub fit_residual: f64,
    exponents: Vec<Vec<u32>>,
}

fn monomials(lag: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut cur = vec![0u32; lag];
        push_compositions(total, 0, &mut cur, &mut out);
    }
    out
}

fn push_compositions(left: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_compositions(left - e, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

pub fn monomial_count(lag: usize, degree: usize) -> usize {
    monomials(lag, degree).len()
}

impl MapModel {
    pub fn new(lag: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self, ChaosError> {
        if lag == 0 || lag > MAX_LAG {
            return Err(ChaosError::Lag(lag));
        }
        let exponents = monomials(lag, degree);
        assert_eq!(coeffs.len(), exponents.len(), "coefficient count");
        Ok(Self {
            lag,
            degree,
            coeffs,
            fit_residual: 0.0,
            exponents,
        })
    }

    /// `lambda * x * (1 - x)` as a one-lag quadratic.
    pub fn logistic(lambda: f64) -> Self {
        Self::new(1, 2, vec![0.0, lambda, -lambda]).expect("valid lag")
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    fn features(&self, state: &[f64], out: &mut [f64]) {
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            *slot = exps
                .iter()
                .zip(state)
                .map(|(&e, &x)| x.powi(e as i32))
                .product();
        }
    }

    /// Evaluates `f` at the lag state (most recent value first).
    pub fn eval(&self, state: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(&self.coeffs)
            .map(|(exps, c)| c * exps.iter().zip(state).map(|(&e, &x)| x.powi(e as i32)).product::<f64>())
            .sum()
    }

    /// Partial derivatives of `f` with respect to each lag coordinate.
    pub fn gradient(&self, state: &[f64]) -> Vec<f64> {
        (0..self.lag)
            .map(|j| {
                self.exponents
                    .iter()
                    .zip(&self.coeffs)
                    .filter(|(exps, _)| exps[j] > 0)
                    .map(|(exps, c)| {
                        let mut term = c * exps[j] as f64;
                        for (i, (&e, &x)) in exps.iter().zip(state).enumerate() {
                            let p = if i == j { e as i32 - 1 } else { e as i32 };
                            term *= x.powi(p);
                        }
                        term
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Map<'a> {
    Logistic(f64),
    Polynomial(&'a MapModel),
}

/// Iterates a map from the lag state `x0` (most recent first) and returns the
/// scalar orbit, starting with `x0[0]`.
pub fn iterate_map(map: Map<'_>, x0: &[f64], steps: usize) -> Result<Vec<f64>, ChaosError> {
    match map {
        Map::Logistic(lambda) => {
            let x = *x0.first().ok_or(ChaosError::Domain { step: 0 })?;
            if !(0.0..=1.0).contains(&x) || !(0.0..=4.0).contains(&lambda) {
                return Err(ChaosError::Domain { step: 0 });
            }
            let mut orbit = Vec::with_capacity(steps + 1);
            orbit.push(x);
            let mut x = x;
            for _ in 0..steps {
                x = lambda * x * (1.0 - x);
                orbit.push(x);
            }
            Ok(orbit)
        }
        Map::Polynomial(model) => {
            if x0.len() != model.lag {
                return Err(ChaosError::Lag(x0.len()));
            }
            let mut state = x0.to_vec();
            let mut orbit = Vec::with_capacity(steps + 1);
            orbit.push(state[0]);
            for step in 1..=steps {
                let next = model.eval(&state);
                if !next.is_finite() {
                    return Err(ChaosError::Domain { step });
                }
                state.rotate_right(1);
                state[0] = next;
                orbit.push(next);
            }
            Ok(orbit)
        }
    }
}

/// Relative singular-value cutoff below which the fit is declared degenerate.
const RANK_TOL: f64 = 1e-10;

pub fn fit_map(series: &[f64], lag: usize, degree: usize) -> Result<MapModel, ChaosError> {
    let mut model = MapModel::new(lag, degree, vec![0.0; monomial_count(lag.clamp(1, MAX_LAG), degree)])?;
    let cols = model.coeffs.len();
    if series.len() <= lag + cols {
        return Err(ChaosError::Length {
            need: lag + cols,
            got: series.len(),
        });
    }
    let rows = series.len() - lag;
    let mut design = DMatrix::<f64>::zeros(rows, cols);
    let mut target = DVector::<f64>::zeros(rows);
    let mut feats = vec![0.0; cols];
    let mut state = vec![0.0; lag];
    for r in 0..rows {
        let n = r + lag - 1;
        for (j, s) in state.iter_mut().enumerate() {
            *s = series[n - j];
        }
        model.features(&state, &mut feats);
        for (c, f) in feats.iter().enumerate() {
            design[(r, c)] = *f;
        }
        target[r] = series[n + 1];
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_TOL {
        return Err(ChaosError::Rank {
            cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    let coeffs = svd.solve(&target, 0.0).map_err(|_| ChaosError::Rank { cond: f64::INFINITY })?;
    let resid = &design * &coeffs - &target;
    model.coeffs = coeffs.iter().copied().collect();
    model.fit_residual = (resid.norm_squared() / rows as f64).sqrt();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    /// The fixed point repeated over every lag coordinate.
    pub point: Vec<f64>,
    pub eigen_moduli: Vec<f64>,
    pub hyperbolic: bool,
    /// Set when `f(x, .., x) = x` holds over the whole scan interval, so no
    /// isolated fixed point exists.
    pub degenerate: bool,
}

fn diagonal_eval(model: &MapModel, x: f64) -> f64 {
    model.eval(&vec![x; model.lag]) - x
}

fn report_at(model: &MapModel, x: f64, degenerate: bool) -> FixedPointReport {
    let grad = model.gradient(&vec![x; model.lag]);
    let q = model.lag;
    // Companion form of the lag map's Jacobian.
    let mut jac = DMatrix::<f64>::zeros(q, q);
    for (j, g) in grad.iter().enumerate() {
        jac[(0, j)] = *g;
    }
    for i in 1..q {
        jac[(i, i - 1)] = 1.0;
    }
    let eigen_moduli: Vec<f64> = if q == 1 {
        vec![grad[0].abs()]
    } else {
        jac.complex_eigenvalues().iter().map(|z| z.norm()).collect()
    };
    let hyperbolic = !degenerate && eigen_moduli.iter().any(|m| *m > 1.0);
    FixedPointReport {
        point: vec![x; q],
        eigen_moduli,
        hyperbolic,
        degenerate,
    }
}

fn bisect(model: &MapModel, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = diagonal_eval(model, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = diagonal_eval(model, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Real fixed points of the lag map inside `[lo, hi]`: dense sign-change scan
/// followed by bisection to machine precision.
pub fn fixed_points(model: &MapModel, lo: f64, hi: f64, resolution: usize) -> Vec<FixedPointReport> {
    let n = resolution.max(2);
    let step = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + step * i as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| diagonal_eval(model, x)).collect();
    let scale = xs.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if vals.iter().all(|v| v.abs() <= 1e-12 * scale) {
        return vec![report_at(model, 0.5 * (lo + hi), true)];
    }
    let mut roots: Vec<f64> = Vec::new();
    for i in 0..n {
        let (a, b) = (vals[i], vals[i + 1]);
        if a == 0.0 {
            roots.push(xs[i]);
        } else if b != 0.0 && (a < 0.0) != (b < 0.0) {
            roots.push(bisect(model, xs[i], xs[i + 1]));
        }
    }
    if vals[n] == 0.0 {
        roots.push(xs[n]);
    }
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-10);
    roots.into_iter().map(|x| report_at(model, x, false)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    ChaoticPreconditions,
    Stochastic,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChaoticPreconditions => "chaotic-preconditions",
            Self::Stochastic => "stochastic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenConfig {
    /// Residual threshold as a fraction of the series standard deviation.
    pub residual_fraction: f64,
    /// Scan interval widening around the observed range.
    pub widen: f64,
    pub resolution: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            residual_fraction: 0.1,
            widen: 0.1,
            resolution: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagResult {
    pub lag: usize,
    /// `None` when the design matrix was rank deficient for this lag.
    pub model: Option<MapModel>,
    pub fixed_points: Vec<FixedPointReport>,
    pub structured: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosVerdict {
    pub verdict: Verdict,
    pub series_std: f64,
    pub per_lag: Vec<LagResult>,
}

impl ChaosVerdict {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,residual,fixed_points,moduli,verdict\n");
        for r in &self.per_lag {
            let residual = r
                .model
                .as_ref()
                .map(|m| format!("{:e}", m.fit_residual))
                .unwrap_or_else(|| "rank-deficient".into());
            let pts: Vec<String> = r.fixed_points.iter().map(|f| format!("{:.10}", f.point[0])).collect();
            let mods: Vec<String> = r
                .fixed_points
                .iter()
                .map(|f| {
                    f.eigen_moduli
                        .iter()
                        .map(|m| format!("{m:.10}"))
                        .collect::<Vec<_>>()
                        .join("|")
                })
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lag,
                residual,
                pts.join(";"),
                mods.join(";"),
                self.verdict.as_str()
            ));
        }
        out
    }
}

/// Fits lag maps for `Q = 1..=max_lag` and reports `ChaoticPreconditions`
/// when some fit explains the series (residual below the configured fraction
/// of its standard deviation) and has a hyperbolic fixed point.
/// Lags whose design is rank deficient (the lower lag already determines the
/// next value) are recorded and skipped.
pub fn chaos_verdict(series: &[f64], max_lag: usize, degree: usize, cfg: &ScreenConfig) -> Result<ChaosVerdict, ChaosError> {
    if max_lag == 0 || max_lag > MAX_LAG {
        return Err(ChaosError::Lag(max_lag));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let std = (series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = cfg.widen * (hi - lo).max(lo.abs().max(hi.abs()) * 1e-6);
    let mut per_lag = Vec::with_capacity(max_lag);
    let mut last_err = None;
    let mut chaotic = false;
    for lag in 1..=max_lag {
        match fit_map(series, lag, degree) {
            Ok(model) => {
                let fps = fixed_points(&model, lo - pad, hi + pad, cfg.resolution);
                let structured = model.fit_residual < cfg.residual_fraction * std;
                chaotic |= structured && fps.iter().any(|f| f.hyperbolic);
                per_lag.push(LagResult {
                    lag,
                    model: Some(model),
                    fixed_points: fps,
                    structured,
                });
            }
            Err(e @ ChaosError::Rank { .. }) => {
                last_err = Some(e);
                per_lag.push(LagResult {
                    lag,
                    model: None,
                    fixed_points: Vec::new(),
                    structured: false,
                });
            }
            Err(e) => return Err(e),
        }
    }
    if per_lag.iter().all(|r| r.model.is_none()) {
        return Err(last_err.expect("at least one lag"));
    }
    Ok(ChaosVerdict {
        verdict: if chaotic {
            Verdict::ChaoticPreconditions
        } else {
            Verdict::Stochastic
        },
        series_std: std,
        per_lag,
    })
}

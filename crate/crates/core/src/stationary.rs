//! Quasistationary density of the one-dimensional reduction of the model,
//! its mass below zero, the shifted cross-correlation and the Kolmogorov
//! indistinguishability gate.

use crate::sde::SdeModel;
use crate::stats::kolmogorov_critical;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StationaryError {
    #[error("bad grid: {0}")]
    Grid(String),
    #[error("exponent range {range:.1} exceeds 700; shrink the grid")]
    Overflow { range: f64 },
    #[error("density mass concentrated in {cells} grid cells")]
    Degenerate { cells: usize },
    #[error("grid [{lo}, {hi}] does not span 0")]
    Range { lo: f64, hi: f64 },
}

/// Drift and diffusion of a scalar Ito process.
pub trait Dynamics1D {
    fn drift(&self, x: f64) -> f64;
    /// Must be positive on the grid.
    fn diffusion(&self, x: f64) -> f64;
    /// Observations behind the fit.
    fn sample_count(&self) -> u64 {
        0
    }
}

/// Closure-backed dynamics, mostly for analytic cases.
pub struct FnDynamics<F, G> {
    pub drift: F,
    pub diffusion: G,
    pub n_fit: u64,
}

impl<F: Fn(f64) -> f64, G: Fn(f64) -> f64> Dynamics1D for FnDynamics<F, G> {
    fn drift(&self, x: f64) -> f64 {
        (self.drift)(x)
    }
    fn diffusion(&self, x: f64) -> f64 {
        (self.diffusion)(x)
    }
    fn sample_count(&self) -> u64 {
        self.n_fit
    }
}

/// The model with `y2` frozen at its running mean.
pub struct MarkovSlice<'a> {
    pub model: &'a SdeModel,
    pub y2: f64,
}

impl SdeModel {
    pub fn markov_slice(&self) -> MarkovSlice<'_> {
        MarkovSlice {
            model: self,
            y2: self.y2_mean(),
        }
    }
}

impl Dynamics1D for MarkovSlice<'_> {
    fn drift(&self, x: f64) -> f64 {
        self.model.eval_drift(x, self.y2)
    }
    fn diffusion(&self, x: f64) -> f64 {
        self.model.eval_diffusion(x)
    }
    fn sample_count(&self) -> u64 {
        self.model.n_updates
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, points: usize) -> Self {
        Self { lo, hi, points }
    }

    /// `mean +- 6 std` with 513 points.
    pub fn around(mean: f64, std: f64) -> Self {
        let s = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        Self::new(mean - 6.0 * s, mean + 6.0 * s, 513)
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

/// Which closed form to use for the stationary solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityForm {
    /// `f = Z^-1 exp(int F / (2 G^2))`.
    #[default]
    Printed,
    /// Zero-flux Fokker-Planck solution `f = Z^-1 G^-2 exp(int 2 F / G^2)`.
    FokkerPlanck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDensity {
    pub lo: f64,
    pub step: f64,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
    pub n_fit: u64,
    pub t_stamp: u64,
}

impl StationaryDensity {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }

    pub fn hi(&self) -> f64 {
        self.x(self.len() - 1)
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.x(i)).collect()
    }

    /// Builds a density from raw non-negative values, normalizing by trapezoid.
    pub fn from_values(lo: f64, step: f64, values: Vec<f64>, n_fit: u64) -> Self {
        let z = trapezoid(&values, step);
        let density: Vec<f64> = values.iter().map(|v| v / z).collect();
        let cdf = cumulative_trapezoid(&density, step);
        Self {
            lo,
            step,
            density,
            cdf,
            n_fit,
            t_stamp: 0,
        }
    }

    /// CDF of the piecewise-linear density; 0 below the grid, 1 above.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi() {
            return 1.0;
        }
        let pos = (x - self.lo) / self.step;
        let i = (pos.floor() as usize).min(self.len() - 2);
        let t = (x - self.x(i)) / self.step;
        let (f0, f1) = (self.density[i], self.density[i + 1]);
        (self.cdf[i] + self.step * (f0 * t + 0.5 * (f1 - f0) * t * t)).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        let xf: Vec<f64> = (0..self.len()).map(|i| self.x(i) * self.density[i]).collect();
        trapezoid(&xf, self.step)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let v: Vec<f64> = (0..self.len())
            .map(|i| (self.x(i) - m).powi(2) * self.density[i])
            .collect();
        trapezoid(&v, self.step)
    }

    /// Two-column `x,f` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,f\n");
        for i in 0..self.len() {
            out.push_str(&format!("{},{:e}\n", self.x(i), self.density[i]));
        }
        out
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn gauss_legendre(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    GL5_NODES
        .iter()
        .zip(GL5_WEIGHTS)
        .map(|(t, w)| w * f(c + r * t))
        .sum::<f64>()
        * r
}

/// Density on a uniform grid from the printed closed form (or the
/// Fokker-Planck variant), with the exponent integrated from the grid
/// midpoint cell by cell using 5-point Gauss-Legendre.
pub fn solve_stationary(
    dynamics: &impl Dynamics1D,
    spec: GridSpec,
    form: DensityForm,
) -> Result<StationaryDensity, StationaryError> {
    if !(spec.hi > spec.lo) || !spec.lo.is_finite() || !spec.hi.is_finite() {
        return Err(StationaryError::Grid(format!("need lo < hi, got [{}, {}]", spec.lo, spec.hi)));
    }
    if spec.points < 64 {
        return Err(StationaryError::Grid(format!("need at least 64 points, got {}", spec.points)));
    }
    let h = spec.step();
    let n = spec.points;
    let x = |i: usize| spec.lo + i as f64 * h;
    let integrand = |u: f64| {
        let g = dynamics.diffusion(u);
        match form {
            DensityForm::Printed => dynamics.drift(u) / (2.0 * g * g),
            DensityForm::FokkerPlanck => 2.0 * dynamics.drift(u) / (g * g),
        }
    };

    let mut cum = Vec::with_capacity(n);
    cum.push(0.0);
    for i in 1..n {
        cum.push(cum[i - 1] + gauss_legendre(&integrand, x(i - 1), x(i)));
    }
    let x0 = 0.5 * (spec.lo + spec.hi);
    let m = (((x0 - spec.lo) / h).floor() as usize).min(n - 1);
    let c0 = cum[m] + gauss_legendre(&integrand, x(m), x0);

    let mut expo: Vec<f64> = cum.iter().map(|c| c - c0).collect();
    if form == DensityForm::FokkerPlanck {
        for (i, e) in expo.iter_mut().enumerate() {
            let g = dynamics.diffusion(x(i));
            *e -= 2.0 * g.ln();
        }
    }
    let (min, max) = expo
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), e| (a.min(*e), b.max(*e)));
    if !(max - min <= 700.0) {
        return Err(StationaryError::Overflow { range: max - min });
    }
    let values: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    let mut d = StationaryDensity::from_values(spec.lo, h, values, dynamics.sample_count());

    let mut masses: Vec<f64> = d
        .density
        .windows(2)
        .map(|w| 0.5 * h * (w[0] + w[1]))
        .collect();
    masses.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut cells = 0;
    for mass in masses {
        acc += mass;
        cells += 1;
        if acc >= 0.999 {
            break;
        }
    }
    if cells < 3 {
        return Err(StationaryError::Degenerate { cells });
    }
    d.t_stamp = 0;
    Ok(d)
}

/// Mass of the density below zero.
pub fn prob_negative(d: &StationaryDensity) -> Result<f64, StationaryError> {
    if d.lo > 0.0 || d.hi() < 0.0 {
        return Err(StationaryError::Range { lo: d.lo, hi: d.hi() });
    }
    Ok(d.cdf_at(0.0))
}

/// Cross-correlation `f(z) = int f_t(y) f_T(y + z) dy` by direct summation.
/// Output node `j` sits at `z = lo_T - lo_t + j h`, `j` from `-(n_t - 1)`.
pub fn convolve_shifted(
    d_t: &StationaryDensity,
    d_tt: &StationaryDensity,
) -> Result<StationaryDensity, StationaryError> {
    let h = d_t.step;
    if (d_tt.step - h).abs() > 1e-9 * h.abs().max(d_tt.step.abs()) {
        return Err(StationaryError::Grid(format!("steps differ: {} vs {}", h, d_tt.step)));
    }
    let (nt, nn) = (d_t.len() as isize, d_tt.len() as isize);
    let mut values = Vec::with_capacity((nt + nn - 1) as usize);
    for j in -(nt - 1)..nn {
        let mut s = 0.0;
        let k_lo = 0.max(-j);
        let k_hi = nt.min(nn - j);
        for k in k_lo..k_hi {
            s += d_t.density[k as usize] * d_tt.density[(k + j) as usize];
        }
        values.push(s * h);
    }
    let lo = d_tt.lo - d_t.lo - (nt - 1) as f64 * h;
    Ok(StationaryDensity::from_values(
        lo,
        h,
        values,
        d_t.n_fit.min(d_tt.n_fit),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsGate {
    pub alpha: f64,
    pub k_alpha: f64,
}

impl KsGate {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            k_alpha: kolmogorov_critical(alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsDecision {
    pub statistic: f64,
    pub threshold: f64,
    pub n: u64,
    pub indistinguishable: bool,
}

impl KsDecision {
    /// Trading is allowed only when the two densities differ significantly.
    pub fn distinguishable(&self) -> bool {
        !self.indistinguishable
    }
}

/// `D = max |K - K'|` over the union of both grids against `k(alpha)/sqrt(N)`
/// with `N` the smaller fit size.
pub fn ks_gate(a: &StationaryDensity, b: &StationaryDensity, gate: &KsGate) -> KsDecision {
    let mut d: f64 = 0.0;
    for x in a.grid().into_iter().chain(b.grid()) {
        d = d.max((a.cdf_at(x) - b.cdf_at(x)).abs());
    }
    let n = a.n_fit.min(b.n_fit);
    let threshold = if n == 0 {
        f64::INFINITY
    } else {
        gate.k_alpha / (n as f64).sqrt()
    };
    KsDecision {
        statistic: d,
        threshold,
        n,
        indistinguishable: d < threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::normal_cdf;
    use std::f64::consts::PI;

    fn dynamics(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, n: u64) -> FnDynamics<impl Fn(f64) -> f64, impl Fn(f64) -> f64> {
        FnDynamics { drift: f, diffusion: g, n_fit: n }
    }

    /// Density of N(mu, sd^2) on a grid, from the printed form with
    /// `F = -(x - mu)`, `G^2 = sd^2 / 2`.
    fn gaussian(mu: f64, sd: f64, lo: f64, hi: f64, points: usize, n: u64) -> StationaryDensity {
        let g = (sd * sd / 2.0).sqrt();
        solve_stationary(&dynamics(move |x| -(x - mu), move |_| g, n), GridSpec::new(lo, hi, points), DensityForm::Printed).unwrap()
    }

    #[test]
    fn gaussian_case() {
        let d = solve_stationary(&dynamics(|x| -x, |_| 1.0, 0), GridSpec::new(-10.0, 10.0, 513), DensityForm::Printed).unwrap();
        let peak = d.density.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-6);
        assert!((d.variance() - 2.0).abs() < 1e-6);
        for i in 0..d.len() {
            let x = d.x(i);
            let exact = (-x * x / 4.0).exp() / (4.0 * PI).sqrt();
            assert!((d.density[i] - exact).abs() < 1e-6);
        }
        assert!((d.cdf.last().unwrap() - 1.0).abs() < 1e-9);
        assert!(d.cdf.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn uniform_case_is_accepted() {
        let d = solve_stationary(&dynamics(|_| 0.0, |_| 1.0, 0), GridSpec::new(-1.0, 1.0, 101), DensityForm::Printed).unwrap();
        assert!(d.density.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn power_law_case() {
        let (l1, l2) = (0.5, 1.0);
        let d = solve_stationary(&dynamics(move |x| l1 * x, move |x| l2 * x, 0), GridSpec::new(0.1, 10.0, 513), DensityForm::Printed).unwrap();
        let raw: Vec<f64> = (0..d.len()).map(|i| d.x(i).powf(0.25)).collect();
        let z = trapezoid(&raw, d.step);
        for (v, r) in d.density.iter().zip(&raw) {
            assert!(((v - r / z) / (r / z)).abs() < 1e-6);
        }
    }

    #[test]
    fn fokker_planck_variant_differs() {
        // F = -x, G = 1: textbook gives exp(-x^2), variance 1/2.
        let d = solve_stationary(&dynamics(|x| -x, |_| 1.0, 0), GridSpec::new(-10.0, 10.0, 513), DensityForm::FokkerPlanck).unwrap();
        assert!((d.variance() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let d = dynamics(|x| -x, |_| 1.0, 0);
        assert!(matches!(solve_stationary(&d, GridSpec::new(1.0, 1.0, 100), DensityForm::Printed), Err(StationaryError::Grid(_))));
        assert!(matches!(solve_stationary(&d, GridSpec::new(-1.0, 1.0, 10), DensityForm::Printed), Err(StationaryError::Grid(_))));
        assert!(matches!(
            solve_stationary(&d, GridSpec::new(-100.0, 100.0, 513), DensityForm::Printed),
            Err(StationaryError::Overflow { .. })
        ));
        // Laplace-like peak: exponent -650|x| keeps the range under 700.
        let sharp = dynamics(|x: f64| -1300.0 * x.signum(), |_| 1.0, 0);
        assert!(matches!(
            solve_stationary(&sharp, GridSpec::new(-1.0, 1.0, 101), DensityForm::Printed),
            Err(StationaryError::Degenerate { .. })
        ));
    }

    #[test]
    fn prob_negative_cases() {
        let sym = gaussian(0.0, 1.0, -8.0, 8.0, 513, 0);
        assert!((prob_negative(&sym).unwrap() - 0.5).abs() < 1e-12);
        let shifted = gaussian(1.0, 1.0, -8.0, 10.0, 513, 0);
        assert!((prob_negative(&shifted).unwrap() - 0.15866).abs() < 1e-4);
        assert!((prob_negative(&shifted).unwrap() - normal_cdf(-1.0)).abs() < 1e-4);
        let positive = gaussian(5.0, 1.0, 0.0, 10.0, 513, 0);
        assert!(prob_negative(&positive).unwrap() == 0.0);
        let away = gaussian(5.0, 1.0, 1.0, 10.0, 513, 0);
        assert!(matches!(prob_negative(&away), Err(StationaryError::Range { .. })));
    }

    #[test]
    fn grid_refinement_converges() {
        let a = prob_negative(&gaussian(1.0, 1.0, -8.0, 10.0, 513, 0)).unwrap();
        let b = prob_negative(&gaussian(1.0, 1.0, -8.0, 10.0, 1025, 0)).unwrap();
        assert!((a - b).abs() < 1e-4);
    }

    fn spike(at: f64, lo: f64, points: usize, h: f64) -> StationaryDensity {
        let mut v = vec![0.0; points];
        v[((at - lo) / h).round() as usize] = 1.0;
        StationaryDensity::from_values(lo, h, v, 10)
    }

    fn peak_x(d: &StationaryDensity) -> f64 {
        let i = (0..d.len()).max_by(|a, b| d.density[*a].total_cmp(&d.density[*b])).unwrap();
        d.x(i)
    }

    #[test]
    fn convolution_spikes() {
        let h = 0.1;
        let a = spike(1.0, -5.0, 101, h);
        assert!(peak_x(&convolve_shifted(&a, &a).unwrap()).abs() < 1e-9);
        let zero = spike(0.0, -5.0, 101, h);
        let c = spike(2.0, -5.0, 101, h);
        assert!((peak_x(&convolve_shifted(&zero, &c).unwrap()) - 2.0).abs() < 1e-9);
        let other_step = spike(0.0, -5.0, 201, 0.05);
        assert!(matches!(convolve_shifted(&zero, &other_step), Err(StationaryError::Grid(_))));
    }

    #[test]
    fn convolution_of_gaussians() {
        let a = gaussian(0.0, 1.0, -10.0, 10.0, 401, 0);
        let z = convolve_shifted(&a, &a).unwrap();
        assert!(z.mean().abs() < 1e-9);
        assert!((z.variance() - 2.0).abs() < 1e-6);
        assert!((z.cdf.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ks_examples() {
        let gate = KsGate::new(0.15);
        assert!((gate.k_alpha - 1.138).abs() < 1e-3);
        let a = gaussian(0.0, 1.0, -10.0, 10.0, 513, 100);
        let same = ks_gate(&a, &a, &gate);
        assert_eq!(same.statistic, 0.0);
        assert!(same.indistinguishable);
        assert!((same.threshold - 0.1138).abs() < 1e-4);

        let b = gaussian(5.0, 1.0, -5.0, 15.0, 513, 100);
        let far = ks_gate(&a, &b, &gate);
        let exact = normal_cdf(2.5) - normal_cdf(-2.5);
        assert!((far.statistic - exact).abs() < 1e-4, "{}", far.statistic);
        assert!((far.statistic - 0.987).abs() < 1e-3);
        assert!(far.distinguishable());
        assert_eq!(ks_gate(&b, &a, &gate), far);
    }

    #[test]
    fn ks_shift_invariance() {
        let gate = KsGate::new(0.15);
        let c = 3.25;
        let a = gaussian(0.0, 1.0, -8.0, 8.0, 513, 200);
        let b = gaussian(0.4, 1.2, -8.0, 8.0, 513, 200);
        let a2 = gaussian(c, 1.0, -8.0 + c, 8.0 + c, 513, 200);
        let b2 = gaussian(0.4 + c, 1.2, -8.0 + c, 8.0 + c, 513, 200);
        let d1 = ks_gate(&a, &b, &gate).statistic;
        let d2 = ks_gate(&a2, &b2, &gate).statistic;
        assert!((d1 - d2).abs() < 1e-12, "{d1} {d2}");
    }
}

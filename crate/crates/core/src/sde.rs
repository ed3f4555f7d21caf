//! Ito model of the level-1 wavelet detail,
//! `dY1 = F(Y1, Y2) dt + G(Y1) dw`, with `F` and `G` expanded in
//! probabilists' Hermite polynomials and adapted online by Robbins-Monro
//! steps.
//!
//! The adapted iterate follows the data with a constant gain; the
//! coefficients used for evaluation are its exponentially weighted tail
//! average over the slow horizon, which keeps the tracking behaviour while
//! removing most of the constant-gain jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// `He_n(x)` by the three-term recurrence `He_{n+1} = x He_n - n He_{n-1}`.
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn hermite_all(order: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if order >= 1 {
        out.push(x);
    }
    for k in 1..order {
        let next = x * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    /// Inputs enter the basis unchanged.
    Identity,
    /// Inputs standardized by exponentially weighted mean/std over the horizon.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    /// Max Hermite degree per variable of the drift tensor basis.
    pub drift_order: usize,
    /// Max Hermite degree of the diffusion basis.
    pub diffusion_order: usize,
    /// Robbins-Monro gain.
    pub beta: f64,
    pub g_floor: f64,
    pub scaling: Scaling,
    /// Slow horizon T in bars: standardization memory and averaging window.
    pub horizon: usize,
    /// Bound on |y| in simulated paths.
    pub clamp: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            drift_order: 3,
            diffusion_order: 2,
            beta: 0.01,
            g_floor: 1e-6,
            scaling: Scaling::Running,
            horizon: 240,
            clamp: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub y1: f64,
    pub y2: f64,
    /// Increment of `y1` over the next bar.
    pub dy1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean1: f64,
    pub var1: f64,
    pub mean2: f64,
    pub var2: f64,
    pub count: u64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            mean1: 0.0,
            var1: 1.0,
            mean2: 0.0,
            var2: 1.0,
            count: 0,
        }
    }
}

impl Standardizer {
    fn push(&mut self, y1: f64, y2: f64, horizon: usize) {
        self.count += 1;
        let w = (1.0 / self.count as f64).max(1.0 / horizon.max(1) as f64);
        let d1 = y1 - self.mean1;
        let d2 = y2 - self.mean2;
        self.mean1 += w * d1;
        self.mean2 += w * d2;
        if self.count == 1 {
            self.var1 = 0.0;
            self.var2 = 0.0;
        } else {
            self.var1 = (1.0 - w) * (self.var1 + w * d1 * d1);
            self.var2 = (1.0 - w) * (self.var2 + w * d2 * d2);
        }
    }

    fn std(var: f64) -> f64 {
        if var > 1e-24 {
            var.sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("bad checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("coefficient count {got} does not match basis size {want}")]
    Shape { want: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeModel {
    pub cfg: SdeConfig,
    /// Robbins-Monro iterate for `F`, row-major over `(i, j)` = degrees in `(y1, y2)`.
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    drift_avg: Vec<f64>,
    diffusion_avg: Vec<f64>,
    /// Running input statistics; also tracked under identity scaling so the
    /// mean of `y2` is available for the one-dimensional reduction.
    pub scale: Standardizer,
    pub n_updates: u64,
}

fn check_len(want: usize, got: usize) -> Result<(), ModelError> {
    if want == got {
        Ok(())
    } else {
        Err(ModelError::Shape { want, got })
    }
}

impl SdeModel {
    /// Zero drift, unit constant diffusion.
    pub fn new(cfg: SdeConfig) -> Self {
        let nf = (cfg.drift_order + 1).pow(2);
        let mut g = vec![0.0; cfg.diffusion_order + 1];
        g[0] = 1.0;
        Self {
            cfg,
            drift: vec![0.0; nf],
            diffusion: g.clone(),
            drift_avg: vec![0.0; nf],
            diffusion_avg: g,
            scale: Standardizer::default(),
            n_updates: 0,
        }
    }

    pub fn with_coefficients(cfg: SdeConfig, drift: Vec<f64>, diffusion: Vec<f64>) -> Result<Self, ModelError> {
        check_len((cfg.drift_order + 1).pow(2), drift.len())?;
        check_len(cfg.diffusion_order + 1, diffusion.len())?;
        Ok(Self {
            cfg,
            drift_avg: drift.clone(),
            diffusion_avg: diffusion.clone(),
            drift,
            diffusion,
            scale: Standardizer::default(),
            n_updates: 0,
        })
    }

    pub fn drift_index(&self, i: usize, j: usize) -> usize {
        i * (self.cfg.drift_order + 1) + j
    }

    /// Fitted (averaged) drift coefficients.
    pub fn drift_coefficients(&self) -> &[f64] {
        &self.drift_avg
    }

    pub fn diffusion_coefficients(&self) -> &[f64] {
        &self.diffusion_avg
    }

    /// Current Robbins-Monro iterate for the drift.
    pub fn drift_iterate(&self) -> &[f64] {
        &self.drift
    }

    pub fn diffusion_iterate(&self) -> &[f64] {
        &self.diffusion
    }

    fn standardize(&self, y1: f64, y2: f64) -> (f64, f64) {
        match self.cfg.scaling {
            Scaling::Identity => (y1, y2),
            Scaling::Running => (
                (y1 - self.scale.mean1) / Standardizer::std(self.scale.var1),
                (y2 - self.scale.mean2) / Standardizer::std(self.scale.var2),
            ),
        }
    }

    /// Tensor basis `He_i(y1) He_j(y2)` at standardized inputs.
    fn drift_basis(&self, y1: f64, y2: f64) -> Vec<f64> {
        let (s1, s2) = self.standardize(y1, y2);
        let o = self.cfg.drift_order;
        let (mut h1, mut h2) = (Vec::with_capacity(o + 1), Vec::with_capacity(o + 1));
        hermite_all(o, s1, &mut h1);
        hermite_all(o, s2, &mut h2);
        let mut out = Vec::with_capacity((o + 1) * (o + 1));
        for a in &h1 {
            for b in &h2 {
                out.push(a * b);
            }
        }
        out
    }

    fn diffusion_basis(&self, y1: f64) -> Vec<f64> {
        let (s1, _) = self.standardize(y1, self.scale.mean2);
        let mut h = Vec::with_capacity(self.cfg.diffusion_order + 1);
        hermite_all(self.cfg.diffusion_order, s1, &mut h);
        h
    }

    fn dot(c: &[f64], b: &[f64]) -> f64 {
        c.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn eval_drift(&self, y1: f64, y2: f64) -> f64 {
        Self::dot(&self.drift_avg, &self.drift_basis(y1, y2))
    }

    /// Unclamped diffusion expansion.
    pub fn diffusion_raw(&self, y1: f64) -> f64 {
        Self::dot(&self.diffusion_avg, &self.diffusion_basis(y1))
    }

    pub fn eval_diffusion(&self, y1: f64) -> f64 {
        self.diffusion_raw(y1).max(self.cfg.g_floor)
    }

    /// Deterministic part of the next increment, `F dt` with `dt = 1` bar.
    pub fn forecast_increment(&self, y1: f64, y2: f64) -> f64 {
        self.eval_drift(y1, y2)
    }

    /// Drift loss `(dy1 - F)^2` for arbitrary drift coefficients at the
    /// current scaling.
    pub fn drift_loss_with(&self, coeffs: &[f64], obs: &Observation) -> f64 {
        let r = obs.dy1 - Self::dot(coeffs, &self.drift_basis(obs.y1, obs.y2));
        r * r
    }

    /// Gradient of the drift loss with respect to the drift coefficients at
    /// the current iterate.
    pub fn drift_gradient(&self, obs: &Observation) -> Vec<f64> {
        let phi = self.drift_basis(obs.y1, obs.y2);
        let r = obs.dy1 - Self::dot(&self.drift, &phi);
        phi.iter().map(|p| -2.0 * r * p).collect()
    }

    /// One Robbins-Monro descent step on `Q = (dy1 - F)^2` for the drift and
    /// `Q_G = ((dy1 - F)^2 - G^2)^2` for the diffusion. Returns the drift loss
    /// before the step.
    ///
    /// The gain is reduced when `beta * |basis|^2` would make the step
    /// overshoot (large standardized inputs under high-degree bases).
    pub fn rm_update(&mut self, obs: &Observation) -> f64 {
        self.scale.push(obs.y1, obs.y2, self.cfg.horizon);
        let beta = self.cfg.beta;

        let phi = self.drift_basis(obs.y1, obs.y2);
        let r = obs.dy1 - Self::dot(&self.drift, &phi);
        let phi_sq: f64 = phi.iter().map(|p| p * p).sum();
        let gain_f = beta / (2.0 * beta * phi_sq).max(1.0);
        for (c, p) in self.drift.iter_mut().zip(&phi) {
            *c += 2.0 * gain_f * r * p;
        }

        let psi = self.diffusion_basis(obs.y1);
        let g = Self::dot(&self.diffusion, &psi).max(self.cfg.g_floor);
        let err = (r * r - g * g).min(24.0 * (g * g).max(1.0));
        let psi_sq: f64 = psi.iter().map(|p| p * p).sum();
        let gain_g = beta / (4.0 * beta * g * g * psi_sq).max(1.0);
        for (c, p) in self.diffusion.iter_mut().zip(&psi) {
            *c += 4.0 * gain_g * err * g * p;
        }

        // The moment loss only sees G^2; keep the branch that is positive at
        // the running mean so the floor does not swallow the fit.
        let centre = self.diffusion_basis(self.scale.mean1);
        if Self::dot(&self.diffusion, &centre) < 0.0 {
            self.diffusion.iter_mut().for_each(|c| *c = -*c);
        }

        self.n_updates += 1;
        let w = (1.0 / self.n_updates as f64).max(1.0 / self.cfg.horizon.max(1) as f64);
        for (a, c) in self.drift_avg.iter_mut().zip(&self.drift) {
            *a += w * (c - *a);
        }
        for (a, c) in self.diffusion_avg.iter_mut().zip(&self.diffusion) {
            *a += w * (c - *a);
        }
        r * r
    }

    /// Running mean of `y2`, where the one-dimensional reduction freezes it.
    pub fn y2_mean(&self) -> f64 {
        self.scale.mean2
    }

    /// Euler-Maruyama path with unit-variance Gaussian increments, `dt = 1`.
    /// Uses the unclamped diffusion (negative values act as zero).
    pub fn simulate_path(&self, y0: f64, y2_source: &[f64], steps: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut path = Vec::with_capacity(steps + 1);
        let mut y = y0;
        path.push(y);
        for k in 0..steps {
            let y2 = y2_source
                .get(k)
                .or(y2_source.last())
                .copied()
                .unwrap_or(0.0);
            let eps: f64 = rng.sample(StandardNormal);
            let g = self.diffusion_raw(y).max(0.0);
            y = (y + self.eval_drift(y, y2) + g * eps).clamp(-self.cfg.clamp, self.cfg.clamp);
            path.push(y);
        }
        path
    }

    /// Versioned flat-text checkpoint.
    pub fn to_text(&self) -> String {
        fn list(v: &[f64]) -> String {
            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
        }
        let s = &self.scale;
        let scaling = match self.cfg.scaling {
            Scaling::Identity => "identity",
            Scaling::Running => "running",
        };
        format!(
            "nsw-sde-model 1\n\
             drift_order={}\ndiffusion_order={}\nbeta={:?}\ng_floor={:?}\nscaling={}\nhorizon={}\nclamp={:?}\n\
             n_updates={}\nscale={:?},{:?},{:?},{:?},{}\n\
             drift={}\ndrift_avg={}\ndiffusion={}\ndiffusion_avg={}\n",
            self.cfg.drift_order,
            self.cfg.diffusion_order,
            self.cfg.beta,
            self.cfg.g_floor,
            scaling,
            self.cfg.horizon,
            self.cfg.clamp,
            self.n_updates,
            s.mean1,
            s.var1,
            s.mean2,
            s.var2,
            s.count,
            list(&self.drift),
            list(&self.drift_avg),
            list(&self.diffusion),
            list(&self.diffusion_avg),
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let err = |line: usize, msg: &str| ModelError::Checkpoint {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "nsw-sde-model 1")) => {}
            _ => return Err(err(1, "missing `nsw-sde-model 1` header")),
        }
        let mut cfg = SdeConfig::default();
        let mut model_fields: std::collections::HashMap<&str, (usize, &str)> = Default::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, "expected key=value"))?;
            model_fields.insert(k.trim(), (i + 1, v.trim()));
        }
        let get = |k: &str| model_fields.get(k).copied().ok_or_else(|| err(0, &format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64, ModelError> {
            let (l, v) = get(k)?;
            v.parse().map_err(|_| err(l, &format!("bad number for `{k}`")))
        };
        let int = |k: &str| -> Result<u64, ModelError> {
            let (l, v) = get(k)?;
            v.parse().map_err(|_| err(l, &format!("bad integer for `{k}`")))
        };
        let list = |k: &str| -> Result<Vec<f64>, ModelError> {
            let (l, v) = get(k)?;
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| err(l, &format!("bad list for `{k}`"))))
                .collect()
        };
        cfg.drift_order = int("drift_order")? as usize;
        cfg.diffusion_order = int("diffusion_order")? as usize;
        cfg.beta = num("beta")?;
        cfg.g_floor = num("g_floor")?;
        cfg.horizon = int("horizon")? as usize;
        cfg.clamp = num("clamp")?;
        cfg.scaling = match get("scaling")?.1 {
            "identity" => Scaling::Identity,
            "running" => Scaling::Running,
            _ => return Err(err(get("scaling")?.0, "unknown scaling")),
        };
        let (sl, sv) = get("scale")?;
        let parts: Vec<&str> = sv.split(',').collect();
        if parts.len() != 5 {
            return Err(err(sl, "scale needs 5 fields"));
        }
        let p = |i: usize| parts[i].parse::<f64>().map_err(|_| err(sl, "bad scale field"));
        let scale = Standardizer {
            mean1: p(0)?,
            var1: p(1)?,
            mean2: p(2)?,
            var2: p(3)?,
            count: parts[4].parse().map_err(|_| err(sl, "bad scale count"))?,
        };
        let mut m = Self::with_coefficients(cfg, list("drift")?, list("diffusion")?)?;
        m.drift_avg = list("drift_avg")?;
        m.diffusion_avg = list("diffusion_avg")?;
        check_len(m.drift.len(), m.drift_avg.len())?;
        check_len(m.diffusion.len(), m.diffusion_avg.len())?;
        m.scale = scale;
        m.n_updates = int("n_updates")?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn identity_cfg(drift_order: usize, diffusion_order: usize) -> SdeConfig {
        SdeConfig {
            drift_order,
            diffusion_order,
            scaling: Scaling::Identity,
            ..SdeConfig::default()
        }
    }

    #[test]
    fn hermite_recurrence_at_integers() {
        // He_2 = x^2 - 1, He_3 = x^3 - 3x, He_4 = x^4 - 6x^2 + 3
        for x in -3..=3 {
            let x = x as f64;
            assert_eq!(hermite(0, x), 1.0);
            assert_eq!(hermite(1, x), x);
            assert_eq!(hermite(2, x), x * x - 1.0);
            assert_eq!(hermite(3, x), x * x * x - 3.0 * x);
            assert_eq!(hermite(4, x), x.powi(4) - 6.0 * x * x + 3.0);
            for n in 1..8 {
                assert_eq!(hermite(n + 1, x), x * hermite(n, x) - n as f64 * hermite(n - 1, x));
            }
        }
    }

    #[test]
    fn drift_examples() {
        let zero = SdeModel::with_coefficients(identity_cfg(3, 2), vec![0.0; 16], vec![0.0; 3]).unwrap();
        assert_eq!(zero.eval_drift(1.7, -0.4), 0.0);
        assert_eq!(zero.forecast_increment(1.7, -0.4), 0.0);

        let cfg = identity_cfg(2, 0);
        let mut c = vec![0.0; 9];
        c[3] = 0.7; // (1, 0)
        let lin = SdeModel::with_coefficients(cfg, c, vec![1.0]).unwrap();
        assert!((lin.eval_drift(2.5, 9.0) - 1.75).abs() < 1e-15);

        let mut c = vec![0.0; 9];
        c[0] = 1.0;
        c[6] = 1.0; // (2, 0)
        let quad = SdeModel::with_coefficients(cfg, c, vec![1.0]).unwrap();
        assert_eq!(quad.eval_drift(2.0, 0.3), 4.0);

        let mut c = vec![0.0; 4];
        c[2] = 0.3;
        let m = SdeModel::with_coefficients(identity_cfg(1, 0), c, vec![1.0]).unwrap();
        assert!((m.forecast_increment(1.0, 0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn diffusion_examples() {
        let m = SdeModel::with_coefficients(identity_cfg(0, 2), vec![0.0], vec![0.0; 3]).unwrap();
        assert_eq!(m.eval_diffusion(0.3), 1e-6);
        let m = SdeModel::with_coefficients(identity_cfg(0, 0), vec![0.0], vec![0.5]).unwrap();
        assert_eq!(m.eval_diffusion(-40.0), 0.5);
        let m = SdeModel::with_coefficients(identity_cfg(0, 1), vec![0.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(m.eval_diffusion(-5.0), 1e-6);
    }

    #[test]
    fn zero_residual_leaves_drift_unchanged() {
        let mut c = vec![0.0; 4];
        c[2] = 0.3;
        let mut m = SdeModel::with_coefficients(identity_cfg(1, 0), c.clone(), vec![0.2]).unwrap();
        m.rm_update(&Observation { y1: 2.0, y2: 0.0, dy1: 0.6 });
        assert_eq!(m.drift_iterate(), &c[..]);
        assert_eq!(m.drift_coefficients(), &c[..]);
    }

    #[test]
    fn update_is_pure() {
        let mut a = SdeModel::new(SdeConfig::default());
        let obs = Observation { y1: 0.3, y2: -1.1, dy1: 0.05 };
        let mut b = a.clone();
        a.rm_update(&obs);
        b.rm_update(&obs);
        assert_eq!(a, b);
    }

    fn linear_stream_fit(seed: u64, steps: usize) -> SdeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SdeModel::new(identity_cfg(1, 0));
        for _ in 0..steps {
            let y: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            m.rm_update(&Observation { y1: y, y2: 0.0, dy1: 0.3 * y + 0.2 * e });
        }
        m
    }

    #[test]
    fn recovers_linear_drift_and_noise() {
        let m = linear_stream_fit(1, 10_000);
        let slope = m.drift_coefficients()[m.drift_index(1, 0)];
        assert!((0.27..=0.33).contains(&slope), "slope {slope}");
        let g = m.eval_diffusion(0.0);
        assert!((g - 0.2).abs() < 0.03, "g {g}");
    }

    #[test]
    fn recovers_pure_noise_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = SdeModel::new(identity_cfg(0, 0));
        for _ in 0..10_000 {
            let e: f64 = rng.sample(StandardNormal);
            m.rm_update(&Observation { y1: 0.0, y2: 0.0, dy1: 0.2 * e });
        }
        assert!((m.eval_diffusion(0.0) - 0.2).abs() < 0.03);
    }

    #[test]
    fn forecast_beats_noise_floor_on_holdout() {
        let m = linear_stream_fit(4, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut sse = 0.0;
        for _ in 0..2000 {
            let y: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let dy = 0.3 * y + 0.2 * e;
            sse += (dy - m.forecast_increment(y, 0.0)).powi(2);
        }
        let rms = (sse / 2000.0).sqrt();
        assert!(rms < 0.2 * 1.05, "rms {rms}");
    }

    #[test]
    fn drift_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let coeffs: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = SdeModel::with_coefficients(identity_cfg(3, 0), coeffs.clone(), vec![1.0]).unwrap();
            let obs = Observation {
                y1: rng.random_range(-2.0..2.0),
                y2: rng.random_range(-2.0..2.0),
                dy1: rng.random_range(-2.0..2.0),
            };
            let grad = m.drift_gradient(&obs);
            for k in 0..coeffs.len() {
                let h = 1e-6;
                let mut up = coeffs.clone();
                up[k] += h;
                let mut dn = coeffs.clone();
                dn[k] -= h;
                let fd = (m.drift_loss_with(&up, &obs) - m.drift_loss_with(&dn, &obs)) / (2.0 * h);
                let tol = 1e-6 * grad[k].abs().max(1.0);
                assert!((fd - grad[k]).abs() <= tol, "k={k} fd={fd} an={}", grad[k]);
            }
        }
    }

    #[test]
    fn trailing_loss_decreases() {
        let mut first = Vec::new();
        let mut last = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut m = SdeModel::new(identity_cfg(1, 0));
            let mut losses = Vec::new();
            for _ in 0..2000 {
                let y: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                losses.push(m.rm_update(&Observation { y1: y, y2: 0.0, dy1: 0.8 * y + 0.2 * e }));
            }
            first.push(losses[..500].iter().sum::<f64>() / 500.0);
            last.push(losses[1500..].iter().sum::<f64>() / 500.0);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&mut last) < median(&mut first));
    }

    #[test]
    fn running_scaling_is_stable_on_wide_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = SdeModel::new(SdeConfig::default());
        for _ in 0..20_000 {
            let y: f64 = 30.0 * rng.sample::<f64, _>(StandardNormal);
            let y2: f64 = 50.0 * rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            m.rm_update(&Observation { y1: y, y2, dy1: -0.5 * y + 3.0 * e });
        }
        assert!(m.drift_coefficients().iter().all(|c| c.is_finite()));
        // Drift is linear in standardized y1 with slope -0.5 * 30.
        let f = m.eval_drift(30.0, 0.0) - m.eval_drift(0.0, 0.0);
        assert!((f + 15.0).abs() < 3.0, "{f}");
    }

    #[test]
    fn diffusion_never_below_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = SdeModel::new(SdeConfig::default());
        for _ in 0..3000 {
            let y: f64 = rng.sample(StandardNormal);
            m.rm_update(&Observation { y1: y, y2: y * 0.5, dy1: 1e-3 * y });
            assert!(m.eval_diffusion(y) >= m.cfg.g_floor);
            assert!(m.eval_diffusion(10.0 * y) >= m.cfg.g_floor);
        }
    }

    #[test]
    fn simulation_examples() {
        let still = SdeModel::with_coefficients(identity_cfg(1, 0), vec![0.0; 4], vec![0.0]).unwrap();
        assert!(still.simulate_path(0.7, &[], 50, 1).iter().all(|y| *y == 0.7));

        let mut c = vec![0.0; 4];
        c[2] = -1.0;
        let decay = SdeModel::with_coefficients(identity_cfg(1, 0), c, vec![0.0]).unwrap();
        let p = decay.simulate_path(1.0, &[0.0], 10, 1);
        assert_eq!(p.len(), 11);
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|y| *y == 0.0));

        let mut c = vec![0.0; 4];
        c[2] = -0.5;
        let half = SdeModel::with_coefficients(identity_cfg(1, 0), c, vec![0.0]).unwrap();
        let p = half.simulate_path(1.0, &[0.0], 10, 1);
        for (k, y) in p.iter().enumerate() {
            assert!((y - 0.5f64.powi(k as i32)).abs() < 1e-15);
        }

        let mut c = vec![0.0; 4];
        c[2] = -2.5;
        let unstable = SdeModel::with_coefficients(identity_cfg(1, 0), c, vec![0.0]).unwrap();
        assert!(unstable.simulate_path(1.0, &[], 200, 1).iter().all(|y| y.abs() <= 1e6));

        let walk = SdeModel::with_coefficients(identity_cfg(0, 0), vec![0.0], vec![1.0]).unwrap();
        let p = walk.simulate_path(0.0, &[], 100_000, 42);
        let inc: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
        let m = inc.iter().sum::<f64>() / inc.len() as f64;
        let v = inc.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (inc.len() - 1) as f64;
        assert!((v - 1.0).abs() < 0.02, "{v}");
        assert_eq!(walk.simulate_path(0.0, &[], 100, 42), walk.simulate_path(0.0, &[], 100, 42));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SdeModel::new(SdeConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let y: f64 = rng.sample(StandardNormal);
            m.rm_update(&Observation { y1: y, y2: -y, dy1: 0.1 * y });
        }
        let text = m.to_text();
        assert_eq!(SdeModel::from_text(&text).unwrap(), m);
        assert!(SdeModel::from_text("garbage").is_err());
        assert!(SdeModel::from_text(&text.replace("drift_order=3", "drift_order=2")).is_err());
    }
}

//! Elementary decision generators. Each block maps model output or an
//! indicator state at a bar to a vote in {-1, 0, +1}.

use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("need at least {need} values, got {got}")]
    Length { need: usize, got: usize },
    #[error("bad block spec `{0}`")]
    Block(String),
    #[error("bad parameter: {0}")]
    Param(String),
}

/// Dead-band of the dynamic criterion.
pub const EPSILON_DYN: f64 = 1e-12;

/// Trend-plus-density criterion: long when the forecast increment is
/// negative and most density mass lies below zero, short in the mirror case.
/// Emits 0 unless the shifted densities differ significantly.
pub fn composite_signal(dy1: f64, p_s: f64, alpha1: f64, gate_passed: bool) -> i8 {
    if !gate_passed {
        return 0;
    }
    if -dy1 > 0.0 && p_s > 1.0 - alpha1 {
        1
    } else if -dy1 < 0.0 && p_s < alpha1 {
        -1
    } else {
        0
    }
}

pub fn dynamic_signal(dy1: f64) -> i8 {
    if dy1.abs() < EPSILON_DYN {
        0
    } else if dy1 < 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacdParams {
    pub fast: usize,
    pub slow: usize,
    pub signal: usize,
}

impl Default for MacdParams {
    fn default() -> Self {
        Self { fast: 12, slow: 26, signal: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BollingerParams {
    pub period: usize,
    pub width: f64,
}

impl Default for BollingerParams {
    fn default() -> Self {
        Self { period: 20, width: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsiParams {
    pub period: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for RsiParams {
    fn default() -> Self {
        Self { period: 14, lower: 30.0, upper: 70.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionParams {
    pub alpha1: f64,
    pub macd: MacdParams,
    pub bollinger: BollingerParams,
    pub rsi: RsiParams,
}

impl Default for CriterionParams {
    fn default() -> Self {
        Self {
            alpha1: 0.15,
            macd: MacdParams::default(),
            bollinger: BollingerParams::default(),
            rsi: RsiParams::default(),
        }
    }
}

fn crossing(prev: f64, cur: f64) -> i8 {
    if prev <= 0.0 && cur > 0.0 {
        1
    } else if prev >= 0.0 && cur < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy)]
struct Ema {
    k: f64,
    value: Option<f64>,
}

impl Ema {
    fn new(period: usize) -> Self {
        Self {
            k: 2.0 / (period as f64 + 1.0),
            value: None,
        }
    }

    fn push(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(v) => v + self.k * (x - v),
        };
        self.value = Some(v);
        v
    }
}

/// Incremental MACD crossing detector.
#[derive(Debug, Clone)]
pub struct MacdTracker {
    params: MacdParams,
    fast: Ema,
    slow: Ema,
    signal: Ema,
    prev_diff: f64,
    count: usize,
}

impl MacdTracker {
    pub fn new(params: MacdParams) -> Self {
        Self {
            params,
            fast: Ema::new(params.fast),
            slow: Ema::new(params.slow),
            signal: Ema::new(params.signal),
            prev_diff: 0.0,
            count: 0,
        }
    }

    /// Signal at the bar just pushed; 0 until `slow + signal` values seen.
    pub fn push(&mut self, x: f64) -> i8 {
        let line = self.fast.push(x) - self.slow.push(x);
        let diff = line - self.signal.push(line);
        self.count += 1;
        let out = if self.count >= self.params.slow + self.params.signal {
            crossing(self.prev_diff, diff)
        } else {
            0
        };
        self.prev_diff = diff;
        out
    }
}

/// `(macd, signal)` lines with EMAs seeded at the first value.
pub fn macd_lines(series: &[f64], params: MacdParams) -> (Vec<f64>, Vec<f64>) {
    let (mut fast, mut slow, mut sig) = (Ema::new(params.fast), Ema::new(params.slow), Ema::new(params.signal));
    let mut macd = Vec::with_capacity(series.len());
    let mut signal = Vec::with_capacity(series.len());
    for &x in series {
        let line = fast.push(x) - slow.push(x);
        macd.push(line);
        signal.push(sig.push(line));
    }
    (macd, signal)
}

/// +1 when the MACD line crosses above its signal line at the last bar,
/// -1 when it crosses below.
pub fn macd_signal(series: &[f64], params: MacdParams) -> Result<i8, SignalError> {
    let need = params.slow + params.signal;
    if series.len() < need || series.len() < 2 {
        return Err(SignalError::Length { need: need.max(2), got: series.len() });
    }
    let mut t = MacdTracker::new(params);
    let mut out = 0;
    for &x in series {
        out = t.push(x);
    }
    Ok(out)
}

/// Lower and upper band over a window (population std).
fn bands(window: impl Iterator<Item = f64> + Clone, width: f64) -> (f64, f64) {
    let n = window.clone().count() as f64;
    let mean = window.clone().sum::<f64>() / n;
    let var = window.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean - width * sd, mean + width * sd)
}

/// Incremental Bollinger re-entry detector.
#[derive(Debug, Clone)]
pub struct BollingerTracker {
    params: BollingerParams,
    window: VecDeque<f64>,
    prev: Option<(f64, f64, f64)>,
}

impl BollingerTracker {
    pub fn new(params: BollingerParams) -> Self {
        Self {
            params,
            window: VecDeque::with_capacity(params.period + 1),
            prev: None,
        }
    }

    pub fn push(&mut self, x: f64) -> i8 {
        self.window.push_back(x);
        if self.window.len() > self.params.period {
            self.window.pop_front();
        }
        if self.window.len() < self.params.period {
            return 0;
        }
        let (lo, hi) = bands(self.window.iter().copied(), self.params.width);
        let out = match self.prev {
            Some((px, plo, phi)) => bollinger_cross(px, plo, phi, x, lo, hi),
            None => 0,
        };
        self.prev = Some((x, lo, hi));
        out
    }
}

fn bollinger_cross(px: f64, plo: f64, phi: f64, x: f64, lo: f64, hi: f64) -> i8 {
    if px < plo && x >= lo {
        1
    } else if px > phi && x <= hi {
        -1
    } else {
        0
    }
}

/// +1 when the last value re-enters from below the lower band, -1 when it
/// re-enters from above the upper band. Bands include the bar they test.
pub fn bollinger_signal(series: &[f64], params: BollingerParams) -> Result<i8, SignalError> {
    let p = params.period;
    if series.len() < p || p < 2 {
        return Err(SignalError::Length { need: p.max(2), got: series.len() });
    }
    if series.len() == p {
        return Ok(0);
    }
    let n = series.len();
    let (plo, phi) = bands(series[n - 1 - p..n - 1].iter().copied(), params.width);
    let (lo, hi) = bands(series[n - p..].iter().copied(), params.width);
    Ok(bollinger_cross(series[n - 2], plo, phi, series[n - 1], lo, hi))
}

/// Incremental Wilder RSI threshold-crossing detector.
#[derive(Debug, Clone)]
pub struct RsiTracker {
    params: RsiParams,
    last: Option<f64>,
    seed_gain: f64,
    seed_loss: f64,
    changes: usize,
    avg: Option<(f64, f64)>,
    prev_rsi: Option<f64>,
}

impl RsiTracker {
    pub fn new(params: RsiParams) -> Self {
        Self {
            params,
            last: None,
            seed_gain: 0.0,
            seed_loss: 0.0,
            changes: 0,
            avg: None,
            prev_rsi: None,
        }
    }

    pub fn rsi(&self) -> Option<f64> {
        self.avg.map(|(g, l)| rsi_value(g, l))
    }

    pub fn push(&mut self, x: f64) -> i8 {
        let Some(last) = self.last.replace(x) else {
            return 0;
        };
        let ch = x - last;
        let (gain, loss) = (ch.max(0.0), (-ch).max(0.0));
        let n = self.params.period as f64;
        self.changes += 1;
        match self.avg {
            None => {
                self.seed_gain += gain;
                self.seed_loss += loss;
                if self.changes == self.params.period {
                    self.avg = Some((self.seed_gain / n, self.seed_loss / n));
                }
            }
            Some((g, l)) => {
                self.avg = Some(((g * (n - 1.0) + gain) / n, (l * (n - 1.0) + loss) / n));
            }
        }
        let Some(cur) = self.rsi() else {
            return 0;
        };
        let out = match self.prev_rsi {
            Some(prev) if prev < self.params.lower && cur >= self.params.lower => 1,
            Some(prev) if prev > self.params.upper && cur <= self.params.upper => -1,
            _ => 0,
        };
        self.prev_rsi = Some(cur);
        out
    }
}

fn rsi_value(gain: f64, loss: f64) -> f64 {
    if loss == 0.0 {
        if gain == 0.0 {
            50.0
        } else {
            100.0
        }
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    }
}

/// +1 when RSI rises through the lower threshold, -1 when it falls through
/// the upper one.
pub fn rsi_signal(series: &[f64], params: RsiParams) -> Result<i8, SignalError> {
    let need = params.period + 2;
    if series.len() < need {
        return Err(SignalError::Length { need, got: series.len() });
    }
    let mut t = RsiTracker::new(params);
    let mut out = 0;
    for &x in series {
        out = t.push(x);
    }
    Ok(out)
}

/// A configured elementary block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    /// Density-plus-trend criterion from the Ito model.
    Composite,
    /// Sign of the forecast increment.
    Dynamic,
    Macd(MacdParams),
    Bollinger(BollingerParams),
    Rsi(RsiParams),
}

impl BlockKind {
    /// Parses `name` or `name(a,b,...)`, e.g. `macd(12,26,9)`, `bollinger(20,2)`.
    pub fn parse(spec: &str) -> Result<Self, SignalError> {
        let spec = spec.trim();
        let (name, args) = match spec.split_once('(') {
            Some((n, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| SignalError::Block(spec.into()))?;
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<f64>().map_err(|_| SignalError::Block(spec.into())))
                    .collect::<Result<Vec<_>, _>>()?;
                (n.trim(), args)
            }
            None => (spec, Vec::new()),
        };
        let period = |x: f64| -> Result<usize, SignalError> {
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(SignalError::Param(format!("`{spec}`: periods must be positive integers")))
            }
        };
        let kind = match (name, args.as_slice()) {
            ("composite", []) => Self::Composite,
            ("dynamic", []) => Self::Dynamic,
            ("macd", []) => Self::Macd(MacdParams::default()),
            ("macd", [f, s, g]) => Self::Macd(MacdParams {
                fast: period(*f)?,
                slow: period(*s)?,
                signal: period(*g)?,
            }),
            ("bollinger", []) => Self::Bollinger(BollingerParams::default()),
            ("bollinger", [p, w]) if *w > 0.0 => Self::Bollinger(BollingerParams {
                period: period(*p)?.max(2),
                width: *w,
            }),
            ("rsi", []) => Self::Rsi(RsiParams::default()),
            ("rsi", [p, lo, hi]) if 0.0 <= *lo && lo < hi && *hi <= 100.0 => Self::Rsi(RsiParams {
                period: period(*p)?,
                lower: *lo,
                upper: *hi,
            }),
            _ => return Err(SignalError::Block(spec.into())),
        };
        Ok(kind)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Composite => write!(f, "composite"),
            Self::Dynamic => write!(f, "dynamic"),
            Self::Macd(p) => write!(f, "macd({},{},{})", p.fast, p.slow, p.signal),
            Self::Bollinger(p) => write!(f, "bollinger({},{})", p.period, p.width),
            Self::Rsi(p) => write!(f, "rsi({},{},{})", p.period, p.lower, p.upper),
        }
    }
}

/// Per-symbol streaming state for one configured block.
#[derive(Debug, Clone)]
pub enum BlockRunner {
    Composite,
    Dynamic,
    Macd(MacdTracker),
    Bollinger(BollingerTracker),
    Rsi(RsiTracker),
}

/// Model-side inputs available at a bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelView {
    pub dy1: f64,
    pub p_s: f64,
    pub gate_passed: bool,
}

impl BlockRunner {
    pub fn new(kind: BlockKind) -> Self {
        match kind {
            BlockKind::Composite => Self::Composite,
            BlockKind::Dynamic => Self::Dynamic,
            BlockKind::Macd(p) => Self::Macd(MacdTracker::new(p)),
            BlockKind::Bollinger(p) => Self::Bollinger(BollingerTracker::new(p)),
            BlockKind::Rsi(p) => Self::Rsi(RsiTracker::new(p)),
        }
    }

    /// Feeds the bar's base value; returns the block's vote.
    pub fn step(&mut self, price: f64, model: Option<&ModelView>, alpha1: f64) -> i8 {
        match self {
            Self::Composite => model.map_or(0, |m| composite_signal(m.dy1, m.p_s, alpha1, m.gate_passed)),
            Self::Dynamic => model.map_or(0, |m| dynamic_signal(m.dy1)),
            Self::Macd(t) => t.push(price),
            Self::Bollinger(t) => t.push(price),
            Self::Rsi(t) => t.push(price),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn composite_examples() {
        assert_eq!(composite_signal(-0.2, 0.90, 0.15, true), 1);
        assert_eq!(composite_signal(0.2, 0.10, 0.15, true), -1);
        assert_eq!(composite_signal(-0.2, 0.90, 0.15, false), 0);
        assert_eq!(composite_signal(0.2, 0.10, 0.15, false), 0);
        assert_eq!(composite_signal(-0.2, 0.80, 0.15, true), 0);
    }

    #[test]
    fn dynamic_examples() {
        assert_eq!(dynamic_signal(0.0), 0);
        assert_eq!(dynamic_signal(-1.0), 1);
        assert_eq!(dynamic_signal(1.0), -1);
        assert_eq!(dynamic_signal(1e-13), 0);
    }

    proptest! {
        #[test]
        fn composite_antisymmetry(dy in -1.0f64..1.0, p in 0.0f64..1.0, a in 0.01f64..0.49) {
            prop_assume!(dy != 0.0);
            prop_assert_eq!(composite_signal(-dy, 1.0 - p, a, true), -composite_signal(dy, p, a, true));
        }

        #[test]
        fn indicators_affine_invariant(xs in prop::collection::vec(1.0f64..2.0, 60..120), shift in -5.0f64..5.0) {
            let scaled: Vec<f64> = xs.iter().map(|x| 4.0 * x + shift).collect();
            let m = MacdParams::default();
            prop_assert_eq!(macd_signal(&xs, m).unwrap(), macd_signal(&scaled, m).unwrap());
            let b = BollingerParams::default();
            prop_assert_eq!(bollinger_signal(&xs, b).unwrap(), bollinger_signal(&scaled, b).unwrap());
        }

        #[test]
        fn trackers_match_functional(xs in prop::collection::vec(0.5f64..2.0, 40..160)) {
            let (m, b, r) = (MacdParams::default(), BollingerParams::default(), RsiParams::default());
            let (mut tm, mut tb, mut tr) = (MacdTracker::new(m), BollingerTracker::new(b), RsiTracker::new(r));
            for n in 1..=xs.len() {
                let (sm, sb, sr) = (tm.push(xs[n - 1]), tb.push(xs[n - 1]), tr.push(xs[n - 1]));
                if let Ok(v) = macd_signal(&xs[..n], m) { prop_assert_eq!(sm, v); }
                if let Ok(v) = bollinger_signal(&xs[..n], b) { prop_assert_eq!(sb, v); }
                if let Ok(v) = rsi_signal(&xs[..n], r) { prop_assert_eq!(sr, v); }
            }
        }

        #[test]
        fn signals_in_range(xs in prop::collection::vec(0.5f64..2.0, 40..100)) {
            for v in [
                macd_signal(&xs, MacdParams::default()).unwrap(),
                bollinger_signal(&xs, BollingerParams::default()).unwrap(),
                rsi_signal(&xs, RsiParams::default()).unwrap(),
            ] {
                prop_assert!((-1..=1).contains(&v));
            }
        }
    }

    /// Straight EMA recurrence, independent of the tracker.
    fn oracle_macd_cross_bar(series: &[f64], fast: usize, slow: usize, sig: usize) -> Option<(usize, i8)> {
        let ema = |xs: &[f64], n: usize| {
            let k = 2.0 / (n as f64 + 1.0);
            let mut out = vec![xs[0]];
            for x in &xs[1..] {
                let p = *out.last().unwrap();
                out.push(p + k * (x - p));
            }
            out
        };
        let f = ema(series, fast);
        let s = ema(series, slow);
        let line: Vec<f64> = f.iter().zip(&s).map(|(a, b)| a - b).collect();
        let signal = ema(&line, sig);
        let diff: Vec<f64> = line.iter().zip(&signal).map(|(a, b)| a - b).collect();
        (1..diff.len()).find_map(|t| {
            if diff[t - 1] <= 0.0 && diff[t] > 0.0 {
                Some((t, 1))
            } else if diff[t - 1] >= 0.0 && diff[t] < 0.0 {
                Some((t, -1))
            } else {
                None
            }
        })
    }

    #[test]
    fn macd_step_series() {
        let mut up = vec![1.0; 100];
        up.extend(vec![2.0; 50]);
        let (bar, dir) = oracle_macd_cross_bar(&up, 12, 26, 9).unwrap();
        assert_eq!((bar, dir), (100, 1));
        assert_eq!(macd_signal(&up[..=bar], MacdParams::default()).unwrap(), 1);
        assert_eq!(macd_signal(&up[..bar], MacdParams::default()).unwrap(), 0);

        let down: Vec<f64> = up.iter().map(|x| 3.0 - x).collect();
        let (bar_d, dir_d) = oracle_macd_cross_bar(&down, 12, 26, 9).unwrap();
        assert_eq!((bar_d, dir_d), (bar, -1));
        assert_eq!(macd_signal(&down[..=bar_d], MacdParams::default()).unwrap(), -1);

        assert_eq!(macd_signal(&[1.5; 60], MacdParams::default()).unwrap(), 0);
        assert!(matches!(macd_signal(&[1.0; 10], MacdParams::default()), Err(SignalError::Length { .. })));
    }

    #[test]
    fn bollinger_examples() {
        let p = BollingerParams::default();
        assert_eq!(bollinger_signal(&[1.2; 30], p).unwrap(), 0);
        // 19 values alternating 10 +- 1 (mean 10, std 1), then a plunge and a recovery.
        let mut s: Vec<f64> = (0..19).map(|i| if i % 2 == 0 { 9.0 } else { 11.0 }).collect();
        s.push(10.0 - 3.0);
        s.push(10.0);
        // Window ending at 7: mean 9.8, lower band 7.66 > 7. Next window: mean 9.85, lower 7.55 < 10.
        let w: Vec<f64> = s[1..21].to_vec();
        let m = w.iter().sum::<f64>() / 20.0;
        assert!(10.0 > m - 2.0 * (w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0).sqrt());
        assert_eq!(bollinger_signal(&s, p).unwrap(), 1);
        let mirror: Vec<f64> = s.iter().map(|x| 20.0 - x).collect();
        assert_eq!(bollinger_signal(&mirror, p).unwrap(), -1);
        assert!(bollinger_signal(&s[..10], p).is_err());
    }

    #[test]
    fn rsi_thresholds() {
        // Long slide, then a sharp rebound lifts RSI back through 30.
        let mut s: Vec<f64> = (0..30).map(|i| 100.0 - i as f64).collect();
        let mut fired = false;
        for k in 0..10 {
            s.push(71.0 + 3.0 * k as f64);
            if rsi_signal(&s, RsiParams::default()).unwrap() == 1 {
                fired = true;
                break;
            }
        }
        assert!(fired);
        assert_eq!(rsi_signal(&[5.0; 20], RsiParams::default()).unwrap(), 0);
    }

    #[test]
    fn block_specs() {
        assert_eq!(BlockKind::parse("composite").unwrap(), BlockKind::Composite);
        assert_eq!(
            BlockKind::parse("macd(5, 10, 3)").unwrap(),
            BlockKind::Macd(MacdParams { fast: 5, slow: 10, signal: 3 })
        );
        let b = BlockKind::parse("bollinger(20,2.5)").unwrap();
        assert_eq!(BlockKind::parse(&b.to_string()).unwrap(), b);
        assert!(BlockKind::parse("macd(1.5,2,3)").is_err());
        assert!(BlockKind::parse("vertical").is_err());
        assert!(BlockKind::parse("rsi(14,80,20)").is_err());
    }
}

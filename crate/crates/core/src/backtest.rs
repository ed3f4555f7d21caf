//! Bar-by-bar execution: per-symbol model and signal pipeline, fusion and
//! coupling, position lifecycle and account bookkeeping.

use crate::assembly::{couple, BlockState, CouplingMatrix, FusionState, RollingCoupling};
use crate::ledger::{Money, Price, Statement, TradeKind, TradeRecord};
use crate::market_data::{Bar, BarSeries, PriceCombo};
use crate::portfolio::{allocate, estimate_profit_stats, full_shares, rebalance_trigger, ProfitSample};
use crate::sde::{Observation, SdeConfig, SdeModel};
use crate::signals::{BlockKind, BlockRunner, ModelView};
use crate::stationary::{ks_gate, prob_negative, solve_stationary, DensityForm, GridSpec, KsGate, StationaryDensity};
use chrono::{DateTime, NaiveDateTime};
use rayon::prelude::*;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("series are not aligned: {0}")]
    Alignment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Long,
    Short,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Long => 1.0,
            Side::Short => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Position {
    pub ticket: u64,
    pub symbol: usize,
    pub side: Side,
    /// Lots.
    pub size: Money,
    /// Bar index of the fill.
    pub open_time: usize,
    /// Epoch seconds of the fill bar.
    pub open_ts: i64,
    /// Mid price at the fill; TP and stop are placed from it.
    pub open_mid: f64,
    /// Fill price including half the spread.
    pub open_price: f64,
    pub tp: f64,
    pub trailing_stop: f64,
    pub floating_pnl: f64,
    pub balance_at_open: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instrument {
    pub spread: f64,
    /// Quote decimals.
    pub digits: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecConfig {
    pub tp_mult: f64,
    pub trail_mult: f64,
    /// Max floating loss of one position as a share of free assets.
    pub emergency_share: f64,
    /// Bars before a second position may open.
    pub second_pos_delay: usize,
    pub slow_window: usize,
    pub initial_deposit: f64,
    /// Fraction of the allocated balance committed as margin per order.
    pub risk: f64,
    pub leverage: f64,
    /// Units of base currency per lot.
    pub contract: f64,
    /// Worker threads for per-symbol work; 0 uses all cores.
    pub threads: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            tp_mult: 2.0,
            trail_mult: 3.0,
            emergency_share: 0.3,
            second_pos_delay: 60,
            slow_window: 240,
            initial_deposit: 5000.0,
            risk: 0.1,
            leverage: 100.0,
            contract: 100_000.0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub combo: PriceCombo,
    /// Haar window of the fast detail; the slow detail uses twice this.
    pub p1: usize,
    pub sde: SdeConfig,
    pub density_form: DensityForm,
    pub grid_points: usize,
    /// Half-width of the density grid in standard deviations.
    pub grid_width: f64,
    pub alpha: f64,
    pub alpha1: f64,
    pub blocks: Vec<BlockKind>,
    pub w0: f64,
    pub beta_w: f64,
    pub compensation: f64,
    pub accuracy_window: usize,
    pub coupling_window: usize,
    pub s_min: f64,
    pub portfolio_beta: f64,
    pub bucket_secs: i64,
    pub n_min: usize,
    pub t_max: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            combo: PriceCombo::HalfSumOpenClose,
            p1: 5,
            // Inputs are RMS-normalized, so the floor is a tenth of their scale.
            sde: SdeConfig {
                g_floor: 0.1,
                ..SdeConfig::default()
            },
            density_form: DensityForm::Printed,
            grid_points: 513,
            grid_width: 6.0,
            alpha: 0.15,
            alpha1: 0.15,
            blocks: vec![BlockKind::Composite, BlockKind::Dynamic],
            w0: 1.0,
            beta_w: 0.05,
            compensation: 0.5,
            accuracy_window: 100,
            coupling_window: 240,
            s_min: 0.5,
            portfolio_beta: 0.25,
            bucket_secs: 3600,
            n_min: 10,
            t_max: 120,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: &str| Err(BacktestError::Config(m.to_string()));
        if self.p1 == 0 {
            return bad("p1 must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.alpha1 > 0.0 && self.alpha1 < 0.5) {
            return bad("alpha1 must lie in (0, 0.5)");
        }
        if !(self.compensation > 0.0 && self.compensation <= 1.0) {
            return bad("compensation must lie in (0, 1]");
        }
        if self.grid_points < 64 || !(self.grid_width > 0.0) {
            return bad("density grid needs >= 64 points and a positive width");
        }
        if self.sde.horizon == 0 || !(self.sde.beta > 0.0) {
            return bad("model horizon and beta must be positive");
        }
        if self.accuracy_window == 0 || self.coupling_window < 3 {
            return bad("accuracy window >= 1 and coupling window >= 3 required");
        }
        if !(self.beta_w > 0.0) || !(self.s_min >= 0.0) || self.bucket_secs <= 0 {
            return bad("beta_w > 0, s_min >= 0 and bucket > 0 required");
        }
        Ok(())
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: &str| Err(BacktestError::Config(m.to_string()));
        if !(self.tp_mult > 0.0 && self.trail_mult > 0.0) {
            return bad("tp_mult and trail_mult must be positive");
        }
        if !(self.emergency_share > 0.0 && self.emergency_share < 1.0) {
            return bad("emergency_share must lie in (0, 1)");
        }
        if !(self.initial_deposit > 0.0) {
            return bad("initial_deposit must be positive");
        }
        if self.slow_window < 2 {
            return bad("slow_window must be >= 2");
        }
        if !(self.risk > 0.0 && self.leverage > 0.0 && self.contract > 0.0) {
            return bad("risk, leverage and contract must be positive");
        }
        Ok(())
    }
}

pub fn take_profit_level(side: Side, open_price: f64, slow_rms: f64, tp_mult: f64) -> f64 {
    open_price + side.sign() * tp_mult * slow_rms
}

/// Tightens the stop towards the bar close; never loosens it.
pub fn trailing_stop_update(pos: &Position, bar: &Bar, slow_rms: f64, trail_mult: f64) -> Position {
    let mut out = pos.clone();
    out.trailing_stop = match pos.side {
        Side::Long => pos.trailing_stop.max(bar.close - trail_mult * slow_rms),
        Side::Short => pos.trailing_stop.min(bar.close + trail_mult * slow_rms),
    };
    out
}

/// Tickets whose floating loss exceeds `emergency_share * free_assets`.
pub fn emergency_check(positions: &[Position], free_assets: f64, emergency_share: f64) -> Vec<u64> {
    positions
        .iter()
        .filter(|p| -p.floating_pnl > emergency_share * free_assets)
        .map(|p| p.ticket)
        .collect()
}

pub fn second_position_gate(existing: &Position, now: usize, second_pos_delay: usize) -> bool {
    existing.floating_pnl < 0.0 && now.saturating_sub(existing.open_time) >= second_pos_delay
}

/// Extra exit rule evaluated at every bar after TP and stop.
pub trait ExitRule: Sync {
    fn should_close(&self, pos: &Position, bar: &Bar, bar_index: usize) -> bool;
}

/// Optional overrides for tests and extensions.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Maps `(bar, symbol, pipeline decision)` to the decision used.
    pub decision: Option<&'a (dyn Fn(usize, usize, Option<Side>) -> Option<Side> + Sync)>,
    pub exits: Vec<&'a dyn ExitRule>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquityPoint {
    pub timestamp: i64,
    pub balance: f64,
    pub equity: f64,
    pub floating_pnl: f64,
    pub open_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EquityCurve {
    pub points: Vec<EquityPoint>,
}

impl EquityCurve {
    pub fn to_csv(&self) -> String {
        // Rounding first keeps tiny negatives from printing as -0.00.
        let cents = |v: f64| (v * 100.0).round() / 100.0 + 0.0;
        let mut out = String::from("timestamp,balance,equity,floating_pnl,open_positions\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{}\n",
                p.timestamp,
                cents(p.balance),
                cents(p.equity),
                cents(p.floating_pnl),
                p.open_positions
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRecord {
    pub timestamp: i64,
    pub shares: Vec<f64>,
    pub j: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutput {
    pub statement: Statement,
    pub equity: EquityCurve,
    pub allocations: Vec<AllocationRecord>,
    /// Most positions held by one symbol at any bar.
    pub max_open_per_symbol: usize,
    pub densities: usize,
    pub gate_openings: usize,
}

impl BacktestOutput {
    pub fn allocations_csv(&self, symbols: &[String]) -> String {
        let mut out = String::from("timestamp,symbol,share,J,beta\n");
        for a in &self.allocations {
            for (s, share) in symbols.iter().zip(&a.shares) {
                out.push_str(&format!("{},{},{},{},{}\n", a.timestamp, s, share, a.j, a.beta));
            }
        }
        out
    }
}

/// Trailing sum and sum of squares over a fixed window, resummed exactly once
/// per window to bound rounding drift.
#[derive(Debug, Clone)]
struct Rolling {
    cap: usize,
    buf: VecDeque<f64>,
    sum: f64,
    sq: f64,
    since: usize,
}

impl Rolling {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            buf: VecDeque::with_capacity(cap + 1),
            sum: 0.0,
            sq: 0.0,
            since: 0,
        }
    }

    fn push(&mut self, x: f64) {
        self.buf.push_back(x);
        self.sum += x;
        self.sq += x * x;
        if self.buf.len() > self.cap {
            let old = self.buf.pop_front().expect("non-empty");
            self.sum -= old;
            self.sq -= old * old;
        }
        self.since += 1;
        if self.since >= self.cap {
            self.since = 0;
            self.sum = self.buf.iter().sum();
            self.sq = self.buf.iter().map(|v| v * v).sum();
        }
    }

    fn mean(&self) -> f64 {
        self.sum / self.buf.len().max(1) as f64
    }

    /// Population standard deviation of the window.
    fn std(&self) -> f64 {
        let n = self.buf.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.sum / n;
        (self.sq / n - m * m).max(0.0).sqrt()
    }
}

/// Std of `price - MA(slow_window)` over the last `slow_window` bars.
#[derive(Debug, Clone)]
struct SlowRms {
    prices: Rolling,
    deviations: Rolling,
}

impl SlowRms {
    fn new(window: usize) -> Self {
        Self {
            prices: Rolling::new(window),
            deviations: Rolling::new(window),
        }
    }

    fn push(&mut self, x: f64) -> f64 {
        self.prices.push(x);
        self.deviations.push(x - self.prices.mean());
        self.deviations.std()
    }
}

/// Exponentially weighted RMS with weight `max(1/n, 1/horizon)`.
#[derive(Debug, Clone, Default)]
struct EwRms {
    ms: f64,
    n: u64,
}

impl EwRms {
    fn push(&mut self, y: f64, horizon: usize) -> f64 {
        self.n += 1;
        let w = (1.0 / self.n as f64).max(1.0 / horizon as f64);
        self.ms += w * (y * y - self.ms);
        self.ms.sqrt()
    }
}

#[derive(Debug, Clone)]
struct SymbolPipe {
    fast: crate::wavelet::HaarStream,
    slow: crate::wavelet::HaarStream,
    rms1: EwRms,
    rms2: EwRms,
    prev_y: Option<(f64, f64)>,
    model: SdeModel,
    density: Option<StationaryDensity>,
    gate_passed: bool,
    p_s: f64,
    runners: Vec<BlockRunner>,
    fusion: FusionState,
    last_u: Option<Vec<i8>>,
    last_fused: f64,
    prev_price: Option<f64>,
    slow_rms: SlowRms,
    densities: usize,
    gate_openings: usize,
}

/// Runs one symbol's model over a base series and returns the last
/// synthesized density, if any.
pub fn last_density(values: &[f64], cfg: &PipelineConfig) -> Option<StationaryDensity> {
    let mut pipe = SymbolPipe::new(cfg, &ExecConfig::default());
    for (t, x) in values.iter().enumerate() {
        pipe.step(*x, t, cfg);
    }
    pipe.density
}

#[derive(Debug, Clone, Copy)]
struct StepOut {
    fused: f64,
    state: BlockState,
    slow_rms: f64,
    log_return: f64,
}

impl SymbolPipe {
    fn new(cfg: &PipelineConfig, exec: &ExecConfig) -> Self {
        Self {
            fast: crate::wavelet::HaarStream::new(cfg.p1),
            slow: crate::wavelet::HaarStream::new(2 * cfg.p1),
            rms1: EwRms::default(),
            rms2: EwRms::default(),
            prev_y: None,
            model: SdeModel::new(cfg.sde),
            density: None,
            gate_passed: false,
            p_s: 0.5,
            runners: cfg.blocks.iter().map(|b| BlockRunner::new(*b)).collect(),
            fusion: FusionState::new(1, cfg.blocks.len(), cfg.w0, cfg.beta_w, cfg.compensation, cfg.accuracy_window),
            last_u: None,
            last_fused: 0.0,
            prev_price: None,
            slow_rms: SlowRms::new(exec.slow_window),
            densities: 0,
            gate_openings: 0,
        }
    }

    fn resynthesize(&mut self, cfg: &PipelineConfig, t: usize) {
        let horizon = cfg.sde.horizon as u64;
        let sc = &self.model.scale;
        let std = sc.var1.sqrt();
        if !(std > 1e-9) {
            return;
        }
        let half = cfg.grid_width * std;
        let spec = GridSpec::new(sc.mean1 - half, sc.mean1 + half, cfg.grid_points);
        let Ok(mut d) = solve_stationary(&self.model.markov_slice(), spec, cfg.density_form) else {
            self.gate_passed = false;
            return;
        };
        d.n_fit = d.n_fit.min(horizon);
        d.t_stamp = t as u64;
        self.densities += 1;
        self.gate_passed = match &self.density {
            Some(prev) => ks_gate(prev, &d, &KsGate::new(cfg.alpha)).distinguishable(),
            None => false,
        };
        self.gate_openings += self.gate_passed as usize;
        self.p_s = prob_negative(&d).unwrap_or(if d.lo > 0.0 { 0.0 } else { 1.0 });
        self.density = Some(d);
    }

    fn step(&mut self, x: f64, t: usize, cfg: &PipelineConfig) -> StepOut {
        let log_return = self.prev_price.map_or(0.0, |p| (x / p).ln());
        if let Some(p) = self.prev_price {
            let realized = x - p;
            self.fusion.score(0, self.last_fused, realized);
            if let Some(u) = &self.last_u {
                let a = if realized > 0.0 {
                    1
                } else if realized < 0.0 {
                    -1
                } else {
                    0
                };
                self.fusion.adapt(0, u, a);
            }
        }

        let horizon = cfg.sde.horizon;
        let mut view = None;
        if let (Some(d1), Some(d2)) = (self.fast.push(x), self.slow.push(x)) {
            let r1 = self.rms1.push(d1, horizon);
            let r2 = self.rms2.push(d2, horizon);
            let y1 = if r1 > 0.0 { d1 / r1 } else { 0.0 };
            let y2 = if r2 > 0.0 { d2 / r2 } else { 0.0 };
            if let Some((p1, p2)) = self.prev_y {
                self.model.rm_update(&Observation { y1: p1, y2: p2, dy1: y1 - p1 });
                if self.model.n_updates % horizon as u64 == 0 {
                    self.resynthesize(cfg, t);
                }
                view = Some(ModelView {
                    dy1: self.model.forecast_increment(y1, y2),
                    p_s: self.p_s,
                    gate_passed: self.gate_passed,
                });
            }
            self.prev_y = Some((y1, y2));
        }

        let u: Vec<i8> = self
            .runners
            .iter_mut()
            .map(|r| r.step(x, view.as_ref(), cfg.alpha1))
            .collect();
        let fused = self.fusion.fused(0, &u);
        self.last_u = Some(u);
        self.last_fused = fused;
        self.prev_price = Some(x);
        StepOut {
            fused,
            state: self.fusion.state(0),
            slow_rms: self.slow_rms.push(x),
            log_return,
        }
    }
}

/// Account currency is USD. `XXXUSD` pays in USD directly, `USDXXX` is
/// converted at the exit price; crosses are treated like `XXXUSD`.
fn quote_conversion(symbol: &str, price: f64) -> f64 {
    let s = symbol.to_ascii_lowercase();
    if s.starts_with("usd") && !s.ends_with("usd") {
        1.0 / price
    } else {
        1.0
    }
}

fn notional_per_lot(symbol: &str, price: f64, contract: f64) -> f64 {
    if symbol.to_ascii_lowercase().starts_with("usd") {
        contract
    } else {
        contract * price
    }
}

/// Statement times have minute resolution.
fn bar_time(ts: i64) -> NaiveDateTime {
    DateTime::from_timestamp(ts - ts.rem_euclid(60), 0).map_or(NaiveDateTime::MIN, |d| d.naive_utc())
}

struct Book<'a> {
    symbols: &'a [String],
    instruments: &'a [Instrument],
    exec: &'a ExecConfig,
    balance: Money,
    open: Vec<Position>,
    closed: Vec<TradeRecord>,
    samples: Vec<ProfitSample>,
    next_ticket: u64,
    closed_since_rebalance: usize,
}

impl Book<'_> {
    fn round(&self, sym: usize, v: f64) -> f64 {
        Price::new(v, self.instruments[sym].digits).value
    }

    fn exit_fill(&self, sym: usize, side: Side, mid: f64) -> f64 {
        self.round(sym, mid - side.sign() * self.instruments[sym].spread / 2.0)
    }

    fn pnl(&self, pos: &Position, exit: f64) -> f64 {
        let sym = &self.symbols[pos.symbol];
        pos.side.sign() * (exit - pos.open_price) * pos.size.to_f64() * self.exec.contract * quote_conversion(sym, exit)
    }

    fn mark(&mut self, sym: usize, mid: f64) {
        for i in 0..self.open.len() {
            if self.open[i].symbol == sym {
                let exit = self.exit_fill(sym, self.open[i].side, mid);
                self.open[i].floating_pnl = self.pnl(&self.open[i], exit);
            }
        }
    }

    fn close(&mut self, idx: usize, exit_mid: f64, ts: i64, emergency: bool) {
        let pos = self.open.remove(idx);
        let exit = self.exit_fill(pos.symbol, pos.side, exit_mid);
        let profit = Money::from_f64(self.pnl(&pos, exit));
        self.balance += profit;
        let digits = self.instruments[pos.symbol].digits;
        self.samples.push(ProfitSample {
            symbol: pos.symbol,
            close_time: ts,
            net: profit.to_f64(),
            balance_at_open: pos.balance_at_open,
        });
        self.closed_since_rebalance += 1;
        self.closed.push(TradeRecord {
            ticket: pos.ticket,
            open_time: bar_time(pos.open_ts),
            kind: match pos.side {
                Side::Long => TradeKind::Buy,
                Side::Short => TradeKind::Sell,
            },
            size: pos.size,
            item: self.symbols[pos.symbol].clone(),
            open_price: Some(Price::new(pos.open_price, digits)),
            sl: Some(Price::new(pos.trailing_stop, digits)),
            tp: Some(Price::new(pos.tp, digits)),
            close_time: Some(bar_time(ts)),
            close_price: Some(Price::new(exit, digits)),
            commission: Money::ZERO,
            taxes: Money::ZERO,
            swap: Money::ZERO,
            profit,
            emergency,
        });
    }
}

/// Runs the full pipeline over aligned series.
pub fn run(
    data: &[BarSeries],
    instruments: &[Instrument],
    pipeline: &PipelineConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<BacktestOutput, BacktestError> {
    run_with(data, instruments, pipeline, exec, seed, &Hooks::default())
}

pub fn run_with(
    data: &[BarSeries],
    instruments: &[Instrument],
    pipeline: &PipelineConfig,
    exec: &ExecConfig,
    _seed: u64,
    hooks: &Hooks<'_>,
) -> Result<BacktestOutput, BacktestError> {
    pipeline.validate()?;
    exec.validate()?;
    let k = data.len();
    if k == 0 {
        return Err(BacktestError::Config("no symbols".into()));
    }
    if instruments.len() != k {
        return Err(BacktestError::Config(format!("{k} series but {} instruments", instruments.len())));
    }
    let n = data[0].len();
    for s in data {
        if s.len() != n || s.bars.iter().zip(&data[0].bars).any(|(a, b)| a.timestamp != b.timestamp) {
            return Err(BacktestError::Alignment(format!("`{}` does not share the timestamps of `{}`", s.symbol, data[0].symbol)));
        }
    }
    let symbols: Vec<String> = data.iter().map(|s| s.symbol.clone()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exec.threads)
        .build()
        .map_err(|e| BacktestError::Config(e.to_string()))?;

    let mut pipes: Vec<SymbolPipe> = (0..k).map(|_| SymbolPipe::new(pipeline, exec)).collect();
    let mut coupling = RollingCoupling::new(k, pipeline.coupling_window);
    let mut book = Book {
        symbols: &symbols,
        instruments,
        exec,
        balance: Money::from_f64(exec.initial_deposit),
        open: Vec::new(),
        closed: Vec::new(),
        samples: Vec::new(),
        next_ticket: 2,
        closed_since_rebalance: 0,
    };
    let start_ts = data[0].bars.first().map_or(0, |b| b.timestamp);
    let deposit = TradeRecord {
        ticket: 1,
        open_time: bar_time(start_ts),
        kind: TradeKind::Balance,
        size: Money::ZERO,
        item: "Deposit".into(),
        open_price: None,
        sl: None,
        tp: None,
        close_time: None,
        close_price: None,
        commission: Money::ZERO,
        taxes: Money::ZERO,
        swap: Money::ZERO,
        profit: book.balance,
        emergency: false,
    };
    let mut shares = vec![1.0 / k as f64; k];
    let mut bars_since_rebalance = 0usize;
    let mut out = BacktestOutput {
        statement: Statement::default(),
        equity: EquityCurve::default(),
        allocations: Vec::new(),
        max_open_per_symbol: 0,
        densities: 0,
        gate_openings: 0,
    };

    for t in 0..n {
        let ts = data[0].bars[t].timestamp;
        let bars: Vec<&Bar> = data.iter().map(|s| &s.bars[t]).collect();
        let steps: Vec<StepOut> = pool.install(|| {
            pipes
                .par_iter_mut()
                .zip(bars.par_iter())
                .map(|(p, b)| p.step(pipeline.combo.apply(b), t, pipeline))
                .collect()
        });

        // Exits on this bar's range, then marks and stops at the close.
        let mut i = 0;
        while i < book.open.len() {
            let pos = &book.open[i];
            let bar = bars[pos.symbol];
            let (stop_hit, tp_hit) = match pos.side {
                Side::Long => (bar.low <= pos.trailing_stop, bar.high >= pos.tp),
                Side::Short => (bar.high >= pos.trailing_stop, bar.low <= pos.tp),
            };
            if stop_hit {
                let level = pos.trailing_stop;
                book.close(i, level, ts, false);
            } else if tp_hit {
                let level = pos.tp;
                book.close(i, level, ts, false);
            } else if hooks.exits.iter().any(|r| r.should_close(pos, bar, t)) {
                book.close(i, bar.close, ts, false);
            } else {
                i += 1;
            }
        }
        for (s, bar) in bars.iter().enumerate() {
            book.mark(s, bar.close);
        }
        for p in book.open.iter_mut() {
            *p = trailing_stop_update(p, bars[p.symbol], steps[p.symbol].slow_rms, exec.trail_mult);
        }
        let floating: f64 = book.open.iter().map(|p| p.floating_pnl).sum();
        let free_assets = book.balance.to_f64() + floating;
        let forced: Vec<u64> = if free_assets > 0.0 {
            emergency_check(&book.open, free_assets, exec.emergency_share)
        } else {
            book.open.iter().filter(|p| p.floating_pnl < 0.0).map(|p| p.ticket).collect()
        };
        for ticket in forced {
            if let Some(idx) = book.open.iter().position(|p| p.ticket == ticket) {
                let sym = book.open[idx].symbol;
                book.close(idx, bars[sym].close, ts, true);
            }
        }

        // Allocation.
        bars_since_rebalance += 1;
        if rebalance_trigger(book.closed_since_rebalance, bars_since_rebalance, pipeline.n_min, pipeline.t_max) {
            bars_since_rebalance = 0;
            book.closed_since_rebalance = 0;
            if let Ok(stats) = estimate_profit_stats(&book.samples, pipeline.bucket_secs) {
                if let Ok(alloc) = allocate(&stats, pipeline.portfolio_beta) {
                    shares = full_shares(&stats, &alloc, k);
                    out.allocations.push(AllocationRecord {
                        timestamp: ts,
                        shares: shares.clone(),
                        j: alloc.j,
                        beta: alloc.beta,
                    });
                }
            }
        }

        // Coupling of the fused decisions; passive symbols sit out.
        if t > 0 {
            coupling.push(steps.iter().map(|s| s.log_return).collect());
        }
        let fused: Vec<f64> = steps
            .iter()
            .map(|s| if s.state == BlockState::Passive { 0.0 } else { s.fused })
            .collect();
        let cm = coupling.matrix().unwrap_or_else(|| CouplingMatrix::identity(k));
        let coupled = couple(&fused, &cm).expect("dimensions fixed at start");

        for s in 0..k {
            let decided = if steps[s].state == BlockState::Active && coupled[s].abs() >= pipeline.s_min && coupled[s] != 0.0 {
                Some(if coupled[s] > 0.0 { Side::Long } else { Side::Short })
            } else {
                None
            };
            let decided = match hooks.decision {
                Some(h) => h(t, s, decided),
                None => decided,
            };
            let Some(side) = decided else { continue };
            let mine: Vec<&Position> = book.open.iter().filter(|p| p.symbol == s).collect();
            let allowed = match mine.as_slice() {
                [] => true,
                [one] => one.open_time < t && second_position_gate(one, t, exec.second_pos_delay),
                _ => false,
            };
            if !allowed || book.balance.cents() <= 0 {
                continue;
            }
            let mid = bars[s].close;
            let inst = instruments[s];
            let notional = notional_per_lot(&symbols[s], mid, exec.contract);
            let raw = shares[s] * book.balance.to_f64() * exec.risk * exec.leverage / notional;
            let size = Money::from_cents(((raw * 100.0).floor() as i64).max(1));
            let rms = steps[s].slow_rms;
            let mut tp = take_profit_level(side, mid, rms, exec.tp_mult);
            if (tp - mid).abs() < inst.spread {
                tp = mid + side.sign() * inst.spread;
            }
            let open_price = book.round(s, mid + side.sign() * inst.spread / 2.0);
            let mut pos = Position {
                ticket: book.next_ticket,
                symbol: s,
                side,
                size,
                open_time: t,
                open_ts: ts,
                open_mid: mid,
                open_price,
                tp,
                trailing_stop: mid - side.sign() * exec.trail_mult * rms.max(inst.spread),
                floating_pnl: 0.0,
                balance_at_open: book.balance.to_f64(),
            };
            pos.floating_pnl = book.pnl(&pos, book.exit_fill(s, side, mid));
            book.next_ticket += 1;
            book.open.push(pos);
        }

        for s in 0..k {
            let c = book.open.iter().filter(|p| p.symbol == s).count();
            out.max_open_per_symbol = out.max_open_per_symbol.max(c);
        }
        let floating: f64 = book.open.iter().map(|p| p.floating_pnl).sum();
        out.equity.points.push(EquityPoint {
            timestamp: ts,
            balance: book.balance.to_f64(),
            equity: book.balance.to_f64() + floating,
            floating_pnl: floating,
            open_positions: book.open.len(),
        });
    }

    let mut open_records = Vec::new();
    for p in &book.open {
        let digits = instruments[p.symbol].digits;
        let mid = data[p.symbol].bars.last().map_or(p.open_mid, |b| b.close);
        open_records.push(TradeRecord {
            ticket: p.ticket,
            open_time: bar_time(p.open_ts),
            kind: match p.side {
                Side::Long => TradeKind::Buy,
                Side::Short => TradeKind::Sell,
            },
            size: p.size,
            item: symbols[p.symbol].clone(),
            open_price: Some(Price::new(p.open_price, digits)),
            sl: Some(Price::new(p.trailing_stop, digits)),
            tp: Some(Price::new(p.tp, digits)),
            close_time: None,
            close_price: Some(Price::new(book.exit_fill(p.symbol, p.side, mid), digits)),
            commission: Money::ZERO,
            taxes: Money::ZERO,
            swap: Money::ZERO,
            profit: Money::from_f64(p.floating_pnl),
            emergency: false,
        });
    }
    let mut closed = std::mem::take(&mut book.closed);
    closed.sort_by(|a, b| a.close_time.cmp(&b.close_time).then(a.ticket.cmp(&b.ticket)));
    out.statement = Statement {
        account: None,
        currency: Some("USD".into()),
        closed,
        open: open_records,
        deposits: vec![deposit],
        reported: Vec::new(),
    };
    out.densities = pipes.iter().map(|p| p.densities).sum();
    out.gate_openings = pipes.iter().map(|p| p.gate_openings).sum();
    Ok(out)
}

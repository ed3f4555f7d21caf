//! MT4-style account statements: exact-decimal parsing, writing, summary
//! statistics and the probability of a profitable trade.

use crate::stats::{ks_one_sample, mean, normal_cdf, sample_std};
use chrono::{NaiveDate, NaiveDateTime};
use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: unknown trade type `{kind}`")]
    UnknownType { line: usize, kind: String },
    #[error("statement has no rows")]
    EmptyStatement,
    #[error("no trades closed in the period")]
    EmptyPeriod,
}

/// Fixed-point value with two decimals (money, lots).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

pub type Lots = Money;

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_cents(c: i64) -> Self {
        Money(c)
    }

    pub const fn cents(self) -> i64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Nearest cent, halves away from zero.
    pub fn from_f64(v: f64) -> Self {
        Money((v * 100.0).round() as i64)
    }

    /// Without thousands separators, as lot sizes are printed.
    pub fn plain(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        format!("{sign}{}.{:02}", abs / 100, abs % 100)
    }

    pub fn abs(self) -> Self {
        Money(self.0.abs())
    }

    /// Accepts space (or no-break space) thousands separators and either
    /// ASCII or Unicode minus: `"-1 297.56"`, `"7 220.22"`, `"−2.60"`.
    pub fn parse(s: &str) -> Option<Money> {
        let cleaned: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '\u{a0}' | '\u{202f}'))
            .map(|c| if c == '\u{2212}' { '-' } else { c })
            .collect();
        let (neg, body) = match cleaned.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, cleaned.strip_prefix('+').unwrap_or(&cleaned)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let whole: i64 = int.parse().ok()?;
        let mut cents: i64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
        if frac.len() == 1 {
            cents *= 10;
        }
        let v = whole.checked_mul(100)?.checked_add(cents)?;
        Some(Money(if neg { -v } else { v }))
    }
}

impl fmt::Display for Money {
    /// `7 220.22`, `-1 512.03`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let digits = (abs / 100).to_string();
        let mut grouped = String::new();
        for (i, ch) in digits.chars().enumerate() {
            if i > 0 && (digits.len() - i) % 3 == 0 {
                grouped.push(' ');
            }
            grouped.push(ch);
        }
        write!(f, "{sign}{grouped}.{:02}", abs % 100)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, o: Money) -> Money {
        Money(self.0 + o.0)
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, o: Money) -> Money {
        Money(self.0 - o.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, o: Money) {
        self.0 += o.0;
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TradeKind {
    Buy,
    Sell,
    Balance,
}

impl TradeKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "buy" => Some(Self::Buy),
            "sell" => Some(Self::Sell),
            "balance" => Some(Self::Balance),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Buy => "buy",
            Self::Sell => "sell",
            Self::Balance => "balance",
        }
    }
}

/// A price with the number of decimals it was quoted with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Price {
    pub value: f64,
    pub digits: u8,
}

impl Price {
    /// Rounds to `digits` decimals.
    pub fn new(value: f64, digits: u8) -> Self {
        let scale = 10f64.powi(digits as i32);
        Self {
            value: (value * scale).round() / scale,
            digits,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let value: f64 = s.parse().ok()?;
        let digits = s.split_once('.').map_or(0, |(_, f)| f.len()) as u8;
        value.is_finite().then_some(Self { value, digits })
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.*}", self.digits as usize, self.value)
    }
}

pub const TIME_FORMAT: &str = "%Y.%m.%d %H:%M";

#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    pub ticket: u64,
    pub open_time: NaiveDateTime,
    pub kind: TradeKind,
    pub size: Lots,
    /// Symbol, or the comment of a balance row.
    pub item: String,
    pub open_price: Option<Price>,
    pub sl: Option<Price>,
    pub tp: Option<Price>,
    /// Absent for open positions and balance rows.
    pub close_time: Option<NaiveDateTime>,
    /// Close price, or the market price of an open position.
    pub close_price: Option<Price>,
    pub commission: Money,
    pub taxes: Money,
    pub swap: Money,
    /// Profit column; the amount of a balance row.
    pub profit: Money,
    /// Closed by the emergency rule.
    pub emergency: bool,
}

impl TradeRecord {
    pub fn net(&self) -> Money {
        self.commission + self.taxes + self.swap + self.profit
    }

    /// Close time, or open time for rows that have none.
    pub fn event_time(&self) -> NaiveDateTime {
        self.close_time.unwrap_or(self.open_time)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Statement {
    pub account: Option<u64>,
    pub currency: Option<String>,
    pub closed: Vec<TradeRecord>,
    pub open: Vec<TradeRecord>,
    pub deposits: Vec<TradeRecord>,
    /// `(label, value)` pairs printed by the statement itself.
    pub reported: Vec<(String, String)>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Closed,
    Open,
    Other,
    Summary,
}

fn is_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10 && b[4] == b'.' && b[7] == b'.'
}

/// Splits `tokens` into money values: each value is a run of tokens whose
/// last token holds the decimal point.
fn money_runs(tokens: &[&str]) -> Option<Vec<Money>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.contains('.') {
            out.push(Money::parse(&tokens[start..=i].join(" "))?);
            start = i + 1;
        }
    }
    (start == tokens.len()).then_some(out)
}

/// Trailing money value: last token plus preceding 1-3 digit groups.
fn trailing_money(tokens: &[&str]) -> Option<(Money, usize)> {
    let last = tokens.len().checked_sub(1)?;
    let mut start = last;
    while start > 0 {
        let t = tokens[start - 1].trim_start_matches(['-', '\u{2212}']);
        if !t.is_empty() && t.len() <= 3 && t.bytes().all(|b| b.is_ascii_digit()) {
            start -= 1;
            if tokens[start].len() != t.len() {
                break;
            }
        } else {
            break;
        }
    }
    Some((Money::parse(&tokens[start..].join(" "))?, start))
}

fn parse_row(tokens: &[&str], line: usize, closed: bool) -> Result<TradeRecord, LedgerError> {
    let err = |msg: &str| LedgerError::Format { line, msg: msg.to_string() };
    let ticket: u64 = tokens[0].parse().map_err(|_| err("bad ticket"))?;
    if tokens.len() < 4 {
        return Err(err("truncated row"));
    }
    let open_time = NaiveDateTime::parse_from_str(&format!("{} {}", tokens[1], tokens[2]), TIME_FORMAT)
        .map_err(|_| err("bad open time"))?;
    let kind = TradeKind::parse(tokens[3]).ok_or_else(|| LedgerError::UnknownType {
        line,
        kind: tokens[3].to_string(),
    })?;
    let mut rest = &tokens[4..];
    let emergency = rest.last() == Some(&"[emergency]");
    if emergency {
        rest = &rest[..rest.len() - 1];
    }
    if kind == TradeKind::Balance {
        let (amount, start) = trailing_money(rest).ok_or_else(|| err("bad balance amount"))?;
        return Ok(TradeRecord {
            ticket,
            open_time,
            kind,
            size: Money::ZERO,
            item: rest[..start].join(" "),
            open_price: None,
            sl: None,
            tp: None,
            close_time: None,
            close_price: None,
            commission: Money::ZERO,
            taxes: Money::ZERO,
            swap: Money::ZERO,
            profit: amount,
            emergency,
        });
    }
    let fixed = if closed { 8 } else { 6 };
    if rest.len() < fixed + 4 {
        return Err(err("truncated row"));
    }
    let price = |s: &str, what: &str| Price::parse(s).ok_or_else(|| err(&format!("bad {what}")));
    let size = Money::parse(rest[0]).filter(|s| s.cents() > 0).ok_or_else(|| err("bad size"))?;
    let item = rest[1].to_string();
    let open_price = price(rest[2], "price")?;
    let sl = price(rest[3], "s/l")?;
    let tp = price(rest[4], "t/p")?;
    let (close_time, close_price) = if closed {
        if !is_date(rest[5]) {
            return Err(err("bad close time"));
        }
        let t = NaiveDateTime::parse_from_str(&format!("{} {}", rest[5], rest[6]), TIME_FORMAT)
            .map_err(|_| err("bad close time"))?;
        (Some(t), price(rest[7], "close price")?)
    } else {
        (None, price(rest[5], "market price")?)
    };
    let money = money_runs(&rest[fixed..]).ok_or_else(|| err("bad money columns"))?;
    let [commission, taxes, swap, profit] = money[..] else {
        return Err(err(&format!("expected 4 money columns, got {}", money.len())));
    };
    Ok(TradeRecord {
        ticket,
        open_time,
        kind,
        size,
        item,
        open_price: Some(open_price),
        sl: Some(sl),
        tp: Some(tp),
        close_time,
        close_price: Some(close_price),
        commission,
        taxes,
        swap,
        profit,
        emergency,
    })
}

fn reported_pairs(line: &str, out: &mut Vec<(String, String)>) {
    if !line.contains('\t') {
        if let Some((k, v)) = line.split_once(':') {
            if !v.trim().is_empty() {
                out.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        return;
    }
    let mut label: Vec<&str> = Vec::new();
    let mut pending: Option<String> = None;
    for field in line.split('\t').map(str::trim).filter(|f| !f.is_empty()) {
        if let Some(k) = pending.take() {
            out.push((k, field.to_string()));
        } else if let Some(stripped) = field.strip_suffix(':') {
            label.push(stripped);
            pending = Some(label.join(" "));
            label.clear();
        } else {
            label.push(field);
        }
    }
}

/// Parses the plain-text statement. Rows may be tab- or space-separated.
pub fn parse_statement(text: &str) -> Result<Statement, LedgerError> {
    let mut st = Statement::default();
    let mut section = Section::Preamble;
    let mut saw_closed = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "Closed Transactions:" => {
                section = Section::Closed;
                saw_closed = true;
                continue;
            }
            "Open Trades:" => {
                section = Section::Open;
                continue;
            }
            "Working Orders:" => {
                section = Section::Other;
                continue;
            }
            "Summary:" | "Details:" => {
                section = Section::Summary;
                continue;
            }
            _ => {}
        }
        if let Some(v) = trimmed.strip_prefix("Account:") {
            st.account = v.split_whitespace().next().and_then(|a| a.parse().ok());
            continue;
        }
        if let Some(v) = trimmed.strip_prefix("Currency:") {
            st.currency = v.split_whitespace().next().map(str::to_string);
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let is_row = tokens.len() >= 3
            && tokens[0].bytes().all(|b| b.is_ascii_digit())
            && is_date(tokens[1]);
        match section {
            Section::Closed | Section::Open if is_row => {
                let rec = parse_row(&tokens, line, section == Section::Closed)?;
                match rec.kind {
                    TradeKind::Balance => st.deposits.push(rec),
                    _ if section == Section::Closed => st.closed.push(rec),
                    _ => st.open.push(rec),
                }
            }
            Section::Closed | Section::Open => {
                if trimmed.starts_with("Ticket") {
                    continue;
                }
                if money_runs(&tokens).is_some() {
                    // Column totals.
                    continue;
                }
                if trimmed.contains("P/L:") {
                    reported_pairs(trimmed, &mut st.reported);
                    continue;
                }
                if tokens[0].bytes().all(|b| b.is_ascii_digit()) {
                    return Err(LedgerError::Format {
                        line,
                        msg: "malformed trade row".into(),
                    });
                }
            }
            Section::Summary => reported_pairs(raw, &mut st.reported),
            Section::Preamble | Section::Other => {}
        }
    }
    if !saw_closed {
        return Err(LedgerError::Format {
            line: text.lines().count().max(1),
            msg: "missing `Closed Transactions:` section".into(),
        });
    }
    Ok(st)
}

fn opt_price(p: &Option<Price>) -> String {
    p.map(|p| p.to_string()).unwrap_or_default()
}

fn fmt_time(t: &NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

/// Writes a statement in the same tab-separated layout the parser reads.
pub fn write_statement(st: &Statement) -> String {
    let mut out = String::new();
    if let Some(a) = st.account {
        out.push_str(&format!("Account: {a}\n\n"));
    }
    if let Some(c) = &st.currency {
        out.push_str(&format!("Currency: {c}\n\n"));
    }
    out.push_str("Closed Transactions:\n\n");
    out.push_str("Ticket\tOpen Time\tType\tSize\tItem\tPrice\tS / L\tT / P\tClose Time\tPrice\tCommission\tTaxes\tSwap\tProfit\n");
    let flag = |r: &TradeRecord| if r.emergency { "\t[emergency]" } else { "" };
    for r in &st.closed {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}{}\n",
            r.ticket,
            fmt_time(&r.open_time),
            r.kind.as_str(),
            r.size.plain(),
            r.item,
            opt_price(&r.open_price),
            opt_price(&r.sl),
            opt_price(&r.tp),
            r.close_time.as_ref().map(fmt_time).unwrap_or_default(),
            opt_price(&r.close_price),
            r.commission,
            r.taxes,
            r.swap,
            r.profit,
            flag(r),
        ));
    }
    for d in &st.deposits {
        out.push_str(&format!(
            "{}\t{}\tbalance\t{}\t\t\t\t\t\t\t\t\t\t{}{}\n",
            d.ticket,
            fmt_time(&d.open_time),
            d.item,
            d.profit,
            flag(d)
        ));
    }
    let closed_pl: Money = st.closed.iter().map(TradeRecord::net).sum();
    out.push_str(&format!("\nClosed P/L: {closed_pl}\n\nOpen Trades:\n\n"));
    out.push_str("Ticket\tOpen Time\tType\tSize\tItem\tPrice\tS / L\tT / P\tPrice\tCommission\tTaxes\tSwap\tProfit\n");
    for r in &st.open {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}{}\n",
            r.ticket,
            fmt_time(&r.open_time),
            r.kind.as_str(),
            r.size.plain(),
            r.item,
            opt_price(&r.open_price),
            opt_price(&r.sl),
            opt_price(&r.tp),
            opt_price(&r.close_price),
            r.commission,
            r.taxes,
            r.swap,
            r.profit,
            flag(r),
        ));
    }
    let floating: Money = st.open.iter().map(TradeRecord::net).sum();
    out.push_str(&format!("\nFloating P/L: {floating}\n"));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Run {
    pub count: usize,
    pub amount: Money,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drawdown {
    pub amount: Money,
    /// Relative to the balance peak it is measured from.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub deposits: Money,
    pub closed_pl: Money,
    pub floating_pl: Money,
    pub balance: Money,
    pub equity: Money,
    pub gross_profit: Money,
    pub gross_loss: Money,
    /// `+inf` when there are no losses.
    pub profit_factor: f64,
    pub expected_payoff: f64,
    pub total_trades: usize,
    /// Trades with net >= 0.
    pub profit_trades: usize,
    pub loss_trades: usize,
    pub short_trades: usize,
    pub short_won: usize,
    pub long_trades: usize,
    pub long_won: usize,
    pub largest_profit: Money,
    pub largest_loss: Money,
    pub average_profit: f64,
    pub average_loss: f64,
    /// Longest winning streak and its amount.
    pub max_consecutive_wins: Run,
    pub max_consecutive_losses: Run,
    /// Most profitable streak and its length.
    pub max_consecutive_profit: Run,
    pub max_consecutive_loss: Run,
    /// Peak-to-trough of the closed-balance curve, deposits included.
    pub maximal_drawdown: Drawdown,
    pub emergency_closes: usize,
    pub probability: ProbabilityReport,
}

/// Closed trades ordered by close time, ties by ticket.
pub fn chronological(trades: &[TradeRecord]) -> Vec<&TradeRecord> {
    let mut v: Vec<&TradeRecord> = trades.iter().collect();
    v.sort_by(|a, b| a.event_time().cmp(&b.event_time()).then(a.ticket.cmp(&b.ticket)));
    v
}

/// Balance changes (deposits and closed trades) in time order with the
/// balance just before each one.
fn balance_timeline(st: &Statement) -> Vec<(&TradeRecord, Money)> {
    let mut events: Vec<&TradeRecord> = st.closed.iter().chain(&st.deposits).collect();
    events.sort_by(|a, b| a.event_time().cmp(&b.event_time()).then(a.ticket.cmp(&b.ticket)));
    let mut bal = Money::ZERO;
    events
        .into_iter()
        .map(|e| {
            let before = bal;
            bal += e.net();
            (e, before)
        })
        .collect()
}

fn runs(nets: &[Money], win: bool) -> (Run, Run) {
    let mut longest = Run { count: 0, amount: Money::ZERO };
    let mut extreme = Run { count: 0, amount: Money::ZERO };
    let mut cur = Run { count: 0, amount: Money::ZERO };
    for n in nets.iter().copied().chain(std::iter::once(if win { Money(-1) } else { Money(0) })) {
        let is_win = n >= Money::ZERO;
        if is_win == win && cur.count < usize::MAX {
            cur.count += 1;
            cur.amount += n;
            continue;
        }
        if cur.count > longest.count {
            longest = cur;
        }
        let better = if win { cur.amount > extreme.amount } else { cur.amount < extreme.amount };
        if cur.count > 0 && better {
            extreme = cur;
        }
        cur = Run { count: 0, amount: Money::ZERO };
    }
    (longest, extreme)
}

pub fn summarize(st: &Statement) -> Result<SummaryStats, LedgerError> {
    if st.closed.is_empty() && st.deposits.is_empty() && st.open.is_empty() {
        return Err(LedgerError::EmptyStatement);
    }
    let ordered = chronological(&st.closed);
    let nets: Vec<Money> = ordered.iter().map(|t| t.net()).collect();
    let closed_pl: Money = nets.iter().sum();
    let deposits: Money = st.deposits.iter().map(TradeRecord::net).sum();
    let floating_pl: Money = st.open.iter().map(TradeRecord::net).sum();
    let gross_profit: Money = nets.iter().filter(|n| n.cents() > 0).sum();
    let gross_loss = -nets.iter().filter(|n| n.cents() < 0).sum::<Money>();
    let profit_trades = nets.iter().filter(|n| n.cents() >= 0).count();
    let loss_trades = nets.len() - profit_trades;
    let side = |k: TradeKind| {
        let t: Vec<&&TradeRecord> = ordered.iter().filter(|r| r.kind == k).collect();
        (t.len(), t.iter().filter(|r| r.net().cents() >= 0).count())
    };
    let (short_trades, short_won) = side(TradeKind::Sell);
    let (long_trades, long_won) = side(TradeKind::Buy);
    let (max_consecutive_wins, max_consecutive_profit) = runs(&nets, true);
    let (max_consecutive_losses, max_consecutive_loss) = runs(&nets, false);

    let mut peak = Money::ZERO;
    let mut dd = Drawdown { amount: Money::ZERO, percent: 0.0 };
    for (e, before) in balance_timeline(st) {
        let bal = before + e.net();
        if bal > peak {
            peak = bal;
        }
        let depth = peak - bal;
        if depth > dd.amount {
            dd = Drawdown {
                amount: depth,
                percent: 100.0 * depth.to_f64() / peak.to_f64(),
            };
        }
    }

    let n = nets.len();
    Ok(SummaryStats {
        deposits,
        closed_pl,
        floating_pl,
        balance: deposits + closed_pl,
        equity: deposits + closed_pl + floating_pl,
        gross_profit,
        gross_loss,
        profit_factor: if n == 0 {
            0.0
        } else if gross_loss.cents() == 0 {
            f64::INFINITY
        } else {
            gross_profit.to_f64() / gross_loss.to_f64()
        },
        expected_payoff: if n == 0 { 0.0 } else { closed_pl.to_f64() / n as f64 },
        total_trades: n,
        profit_trades,
        loss_trades,
        short_trades,
        short_won,
        long_trades,
        long_won,
        largest_profit: nets.iter().copied().filter(|m| m.cents() > 0).max().unwrap_or_default(),
        largest_loss: nets.iter().copied().filter(|m| m.cents() < 0).min().unwrap_or_default(),
        average_profit: if profit_trades > 0 { gross_profit.to_f64() / profit_trades as f64 } else { 0.0 },
        average_loss: if loss_trades > 0 { -gross_loss.to_f64() / loss_trades as f64 } else { 0.0 },
        max_consecutive_wins,
        max_consecutive_losses,
        max_consecutive_profit,
        max_consecutive_loss,
        maximal_drawdown: dd,
        emergency_closes: ordered.iter().filter(|t| t.emergency).count(),
        probability: probability_profitable(st, 0.05),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityReport {
    pub p: f64,
    pub normal_ok: bool,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    pub ks_statistic: f64,
    pub ks_critical: f64,
}

/// Balance-normalized returns of closed trades in time order, each divided by
/// the balance before its close (deposits and earlier closes).
pub fn normalized_returns(st: &Statement) -> Vec<(&TradeRecord, f64)> {
    balance_timeline(st)
        .into_iter()
        .filter(|(e, _)| e.kind != TradeKind::Balance)
        .map(|(e, before)| (e, e.net().to_f64() / before.to_f64()))
        .collect()
}

/// `Phi(mu / sigma)` under a normal fit to the returns, with a one-sample
/// Kolmogorov check of that fit at `alpha_fit`.
pub fn probability_from_returns(returns: &[f64], alpha_fit: f64) -> ProbabilityReport {
    let n = returns.len();
    let mu = if n > 0 { mean(returns) } else { 0.0 };
    let sigma = sample_std(returns);
    if n < 20 {
        let wins = returns.iter().filter(|r| **r > 0.0).count();
        return ProbabilityReport {
            p: if n > 0 { wins as f64 / n as f64 } else { 0.0 },
            normal_ok: false,
            n,
            mu,
            sigma,
            ks_statistic: f64::NAN,
            ks_critical: f64::NAN,
        };
    }
    if sigma == 0.0 {
        let p = match mu.partial_cmp(&0.0) {
            Some(Ordering::Greater) => 1.0,
            Some(Ordering::Less) => 0.0,
            _ => 0.5,
        };
        return ProbabilityReport {
            p,
            normal_ok: false,
            n,
            mu,
            sigma,
            ks_statistic: f64::NAN,
            ks_critical: f64::NAN,
        };
    }
    let ks = ks_one_sample(returns, |x| normal_cdf((x - mu) / sigma), alpha_fit);
    ProbabilityReport {
        p: normal_cdf(mu / sigma),
        normal_ok: ks.passed,
        n,
        mu,
        sigma,
        ks_statistic: ks.statistic,
        ks_critical: ks.critical,
    }
}

pub fn probability_profitable(st: &Statement, alpha_fit: f64) -> ProbabilityReport {
    let r: Vec<f64> = normalized_returns(st).into_iter().map(|(_, r)| r).collect();
    probability_from_returns(&r, alpha_fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub transactions: usize,
    pub closed_profit: Money,
    pub floating: Money,
    pub after_closing: Money,
    pub emergency_closes: usize,
    pub probability: ProbabilityReport,
}

impl Table1Row {
    pub fn to_text(&self) -> String {
        let p = &self.probability;
        format!(
            "period\ttransactions\tclosed_profit\tfloating\tafter_closing\temergency_closes\tprobability\tmu\tsigma\tks_d\n\
             {}-{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.6}\t{:.6}\t{:.4}\n",
            self.from.format("%d.%m.%Y"),
            self.to.format("%d.%m.%Y"),
            self.transactions,
            self.closed_profit.plain(),
            self.floating.plain(),
            self.after_closing.plain(),
            self.emergency_closes,
            p.p,
            p.mu,
            p.sigma,
            p.ks_statistic,
        )
    }
}

impl Statement {
    /// First and last date with a closed trade.
    pub fn period(&self) -> Option<(NaiveDate, NaiveDate)> {
        let dates = self.closed.iter().map(|t| t.event_time().date());
        Some((dates.clone().min()?, dates.max()?))
    }
}

/// Row over trades closed on dates `from..=to`. Floating P/L counts only when
/// the period reaches the last close in the statement.
pub fn table1_report(st: &Statement, from: NaiveDate, to: NaiveDate) -> Result<Table1Row, LedgerError> {
    let in_period = |t: &TradeRecord| {
        let d = t.event_time().date();
        d >= from && d <= to
    };
    let picked: Vec<(&TradeRecord, f64)> = normalized_returns(st).into_iter().filter(|(t, _)| in_period(t)).collect();
    if picked.is_empty() {
        return Err(LedgerError::EmptyPeriod);
    }
    let closed_profit: Money = picked.iter().map(|(t, _)| t.net()).sum();
    let last_close = st.closed.iter().map(|t| t.event_time().date()).max();
    let floating = if last_close.is_some_and(|d| to >= d) {
        st.open.iter().map(TradeRecord::net).sum()
    } else {
        Money::ZERO
    };
    let returns: Vec<f64> = picked.iter().map(|(_, r)| *r).collect();
    Ok(Table1Row {
        from,
        to,
        transactions: picked.len(),
        closed_profit,
        floating,
        after_closing: closed_profit + floating,
        emergency_closes: picked.iter().filter(|(t, _)| t.emergency).count(),
        probability: probability_from_returns(&returns, 0.05),
    })
}

impl SummaryStats {
    /// Aligned `label: value` text.
    pub fn to_text(&self) -> String {
        let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let pf = if self.profit_factor.is_finite() {
            format!("{:.2}", self.profit_factor)
        } else {
            "inf".to_string()
        };
        let p = &self.probability;
        let lines = [
            ("Deposit/Withdrawal", self.deposits.to_string()),
            ("Closed Trade P/L", self.closed_pl.to_string()),
            ("Floating P/L", self.floating_pl.to_string()),
            ("Balance", self.balance.to_string()),
            ("Equity", self.equity.to_string()),
            ("Gross Profit", self.gross_profit.to_string()),
            ("Gross Loss", self.gross_loss.to_string()),
            ("Profit Factor", pf),
            ("Expected Payoff", format!("{:.2}", self.expected_payoff)),
            ("Total Trades", self.total_trades.to_string()),
            ("Short Positions (won %)", format!("{} ({:.2}%)", self.short_trades, pct(self.short_won, self.short_trades))),
            ("Long Positions (won %)", format!("{} ({:.2}%)", self.long_trades, pct(self.long_won, self.long_trades))),
            ("Profit Trades (% of total)", format!("{} ({:.2}%)", self.profit_trades, pct(self.profit_trades, self.total_trades))),
            ("Loss Trades (% of total)", format!("{} ({:.2}%)", self.loss_trades, pct(self.loss_trades, self.total_trades))),
            ("Largest profit trade", self.largest_profit.to_string()),
            ("Largest loss trade", self.largest_loss.to_string()),
            ("Average profit trade", format!("{:.2}", self.average_profit)),
            ("Average loss trade", format!("{:.2}", self.average_loss)),
            ("Maximum consecutive wins ($)", format!("{} ({})", self.max_consecutive_wins.count, self.max_consecutive_wins.amount)),
            ("Maximum consecutive losses ($)", format!("{} ({})", self.max_consecutive_losses.count, self.max_consecutive_losses.amount)),
            ("Maximal consecutive profit (count)", format!("{} ({})", self.max_consecutive_profit.amount, self.max_consecutive_profit.count)),
            ("Maximal consecutive loss (count)", format!("{} ({})", self.max_consecutive_loss.amount, self.max_consecutive_loss.count)),
            ("Maximal Drawdown (balance)", format!("{} ({:.2}%)", self.maximal_drawdown.amount, self.maximal_drawdown.percent)),
            ("Emergency closes", self.emergency_closes.to_string()),
            ("Probability of profitable trade", format!("{:.4}", p.p)),
            ("Return mean / sd", format!("{:.6} / {:.6}", p.mu, p.sigma)),
            ("Normal fit KS D / critical", format!("{:.4} / {:.4} ({})", p.ks_statistic, p.ks_critical, if p.normal_ok { "accepted" } else { "rejected" })),
        ];
        let width = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(0) + 1;
        lines
            .iter()
            .map(|(l, v)| format!("{:<width$} {v}\n", format!("{l}:")))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let p = &self.probability;
        format!(
            "closed_pl,floating_pl,balance,equity,gross_profit,gross_loss,profit_factor,expected_payoff,total_trades,profit_trades,loss_trades,max_drawdown,max_drawdown_pct,probability,mu,sigma,ks_d\n\
             {:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{},{},{},{},{},{:.2},{},{},{},{},{}\n",
            self.closed_pl.to_f64(),
            self.floating_pl.to_f64(),
            self.balance.to_f64(),
            self.equity.to_f64(),
            self.gross_profit.to_f64(),
            self.gross_loss.to_f64(),
            self.profit_factor,
            self.expected_payoff,
            self.total_trades,
            self.profit_trades,
            self.loss_trades,
            self.maximal_drawdown.amount.to_f64(),
            self.maximal_drawdown.percent,
            p.p,
            p.mu,
            p.sigma,
            p.ks_statistic,
        )
    }
}

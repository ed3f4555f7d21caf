//! OHLC candle ingestion and the base/log-return series built from it.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: timestamp {timestamp} does not increase")]
    Order { line: u64, timestamp: i64 },
    #[error("empty input")]
    EmptyInput,
    #[error("non-positive value {value} at index {index}")]
    Domain { index: usize, value: f64 },
    #[error("series too short: need {need}, got {got}")]
    Length { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    fn check(&self) -> Result<(), String> {
        let vals = [self.open, self.high, self.low, self.close, self.volume];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        if self.low > self.high {
            return Err(format!("high {} below low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err("open/close outside [low, high]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub symbol: String,
    /// Bar period in seconds.
    pub frame: i64,
    pub bars: Vec<Bar>,
}

impl BarSeries {
    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriceCombo {
    #[default]
    HalfSumOpenClose,
    Close,
    Ohlc4,
}

impl PriceCombo {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "halfsumopenclose" | "half_sum_open_close" | "oc2" => Some(Self::HalfSumOpenClose),
            "close" => Some(Self::Close),
            "ohlc4" => Some(Self::Ohlc4),
            _ => None,
        }
    }

    pub fn apply(self, bar: &Bar) -> f64 {
        match self {
            Self::HalfSumOpenClose => 0.5 * (bar.open + bar.close),
            Self::Close => bar.close,
            Self::Ohlc4 => 0.25 * (bar.open + bar.high + bar.low + bar.close),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseSeries {
    pub symbol: String,
    pub values: Vec<f64>,
    pub combo: PriceCombo,
}

fn parse_field(field: Option<&str>, name: &str, line: u64) -> Result<f64, DataError> {
    let raw = field.ok_or_else(|| DataError::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
        line,
        msg: format!("bad {name} `{}`", raw.trim()),
    })
}

/// Parses `timestamp,open,high,low,close,volume` rows. A first row whose
/// timestamp column is not an integer is treated as a header.
pub fn parse_candles(text: &str, symbol: &str, frame: i64) -> Result<BarSeries, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut bars: Vec<Bar> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let ts_raw = rec.get(0).unwrap_or("");
        let timestamp = match ts_raw.parse::<i64>() {
            Ok(t) => t,
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(DataError::Parse {
                    line,
                    msg: format!("bad timestamp `{ts_raw}`"),
                })
            }
        };
        if rec.len() < 6 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        let bar = Bar {
            timestamp,
            open: parse_field(rec.get(1), "open", line)?,
            high: parse_field(rec.get(2), "high", line)?,
            low: parse_field(rec.get(3), "low", line)?,
            close: parse_field(rec.get(4), "close", line)?,
            volume: parse_field(rec.get(5), "volume", line)?,
        };
        bar.check().map_err(|msg| DataError::Parse { line, msg })?;
        if let Some(prev) = bars.last() {
            if bar.timestamp <= prev.timestamp {
                return Err(DataError::Order {
                    line,
                    timestamp: bar.timestamp,
                });
            }
        }
        bars.push(bar);
    }
    Ok(BarSeries {
        symbol: symbol.to_string(),
        frame,
        bars,
    })
}

pub fn load_candles(path: &Path, symbol: &str, frame: i64) -> Result<BarSeries, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_candles(&text, symbol, frame)
}

pub fn write_candles(series: &BarSeries) -> String {
    let mut out = String::from("timestamp,open,high,low,close,volume\n");
    for b in &series.bars {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.timestamp, b.open, b.high, b.low, b.close, b.volume
        ));
    }
    out
}

pub fn base_series(bars: &BarSeries, combo: PriceCombo) -> Result<BaseSeries, DataError> {
    if bars.is_empty() {
        return Err(DataError::EmptyInput);
    }
    Ok(BaseSeries {
        symbol: bars.symbol.clone(),
        values: bars.bars.iter().map(|b| combo.apply(b)).collect(),
        combo,
    })
}

/// `ln(X_n / X_{n-1})` for consecutive values.
pub fn log_returns(values: &[f64]) -> Result<Vec<f64>, DataError> {
    if values.len() < 2 {
        return Err(DataError::Length {
            need: 2,
            got: values.len(),
        });
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
    {
        return Err(DataError::Domain { index, value });
    }
    Ok(values.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

/// Restricts every series to the timestamps present in all of them, so bar
/// index `i` refers to the same instant across symbols.
pub fn align(series: &[BarSeries]) -> Vec<BarSeries> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    let mut common: BTreeSet<i64> = first.bars.iter().map(|b| b.timestamp).collect();
    for s in &series[1..] {
        let ts: BTreeSet<i64> = s.bars.iter().map(|b| b.timestamp).collect();
        common = common.intersection(&ts).copied().collect();
    }
    series
        .iter()
        .map(|s| BarSeries {
            symbol: s.symbol.clone(),
            frame: s.frame,
            bars: s
                .bars
                .iter()
                .filter(|b| common.contains(&b.timestamp))
                .copied()
                .collect(),
        })
        .collect()
}

/// Seeded synthetic candles: a log-random-walk with a slowly rotating drift
/// and volatility clustering. Used for fixtures, stress runs and the `synth`
/// command.
pub fn synthetic_series(
    symbol: &str,
    n: usize,
    start_price: f64,
    volatility: f64,
    frame: i64,
    start_ts: i64,
    seed: u64,
) -> BarSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut price = start_price;
    let mut vol = volatility;
    let mut drift: f64 = 0.0;
    let mut bars = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let dz: f64 = rng.sample(StandardNormal);
        drift = 0.995 * drift + 0.02 * volatility * dz;
        vol = (0.98 * vol + 0.02 * volatility * (1.0 + 0.5 * z.abs())).max(0.2 * volatility);
        let open = price;
        let close = open * (drift + vol * z).exp();
        let wick_hi: f64 = rng.random::<f64>() * vol * open;
        let wick_lo: f64 = rng.random::<f64>() * vol * open;
        let high = open.max(close) + wick_hi;
        let low = (open.min(close) - wick_lo).max(open.min(close) * 0.5);
        bars.push(Bar {
            timestamp: start_ts + i as i64 * frame,
            open,
            high,
            low,
            close,
            volume: rng.random_range(50..500) as f64,
        });
        price = close;
    }
    BarSeries {
        symbol: symbol.to_string(),
        frame,
        bars,
    }
}

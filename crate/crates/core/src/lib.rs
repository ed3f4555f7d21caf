//! Multicurrency trading model: Haar wavelet streams, an online Ito model
//! with its stationary density, signal fusion, portfolio shares, a bar-level
//! backtester and account statement analytics.

pub mod assembly;
pub mod backtest;
pub mod chaos;
pub mod config;
pub mod ledger;
pub mod market_data;
pub mod portfolio;
pub mod sde;
pub mod signals;
pub mod stationary;
pub mod stats;
pub mod wavelet;

pub use backtest::{BacktestError, BacktestOutput, ExecConfig, Instrument, PipelineConfig, Side};
pub use config::{ConfigError, RunConfig, SymbolConfig};
pub use ledger::{LedgerError, Money, Statement, SummaryStats, TradeRecord};
pub use market_data::{Bar, BarSeries, DataError, PriceCombo};
pub use portfolio::{Allocation, PortfolioError, ProfitStats};
pub use sde::{SdeConfig, SdeModel};
pub use signals::{BlockKind, ModelView};
pub use stationary::{DensityForm, StationaryDensity};
pub use wavelet::WaveletPyramid;

//! `nsw` command line: backtests, statement analysis, chaos screening and
//! model dumps.

use clap::{Parser, Subcommand};
use nsw_core::backtest::{last_density, run};
use nsw_core::chaos::{chaos_verdict, ScreenConfig, MAX_LAG};
use nsw_core::ledger::{parse_statement, summarize, table1_report, write_statement, LedgerError};
use nsw_core::market_data::{align, base_series, load_candles, synthetic_series, write_candles, DataError};
use nsw_core::wavelet::{decompose, FilterBank};
use nsw_core::{BacktestError, ConfigError, PriceCombo, RunConfig};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Alignment(_) => Self::Data(e.to_string()),
            BacktestError::Config(_) => Self::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "nsw", version, about = "Wavelet/Ito multicurrency trading model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the backtest described by a config file.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summary statistics and probability of a profitable trade for a
    /// statement.
    AnalyzeStatement {
        #[arg(long)]
        statement: PathBuf,
    },
    /// Lag-map fits and fixed-point verdict for a candle file.
    ChaosScreen {
        #[arg(long)]
        candles: PathBuf,
        #[arg(long, default_value_t = MAX_LAG)]
        qmax: usize,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, default_value_t = 60)]
        frame: i64,
        #[arg(long, default_value = "oc2")]
        combo: String,
    },
    /// Haar pyramid of a candle file's base series as CSV.
    DumpWavelet {
        #[arg(long)]
        candles: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 60)]
        frame: i64,
        #[arg(long, default_value = "oc2")]
        combo: String,
    },
    /// Last stationary density of one configured symbol as `x,f` CSV.
    DumpDensity {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured symbol.
        #[arg(long)]
        symbol: Option<String>,
    },
    /// Seeded synthetic candle files, one per symbol.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "eurusd,gbpusd,usdjpy")]
        symbols: Vec<String>,
        #[arg(long, default_value_t = 20_000)]
        bars: usize,
        #[arg(long, default_value_t = 60)]
        frame: i64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn combo(s: &str) -> Result<PriceCombo, CliError> {
    PriceCombo::parse(s).ok_or_else(|| CliError::Config(format!("--combo: unknown combo `{s}`")))
}

fn base_values(path: &Path, frame: i64, combo: PriceCombo) -> Result<Vec<f64>, CliError> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    let bars = load_candles(path, name, frame)?;
    Ok(base_series(&bars, combo)?.values)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn cmd_backtest(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let raw = std::fs::read(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for s in &cfg.symbols {
        if !s.file.is_file() {
            return Err(CliError::Data(format!("candle file not found: {}", s.file.display())));
        }
    }
    if cfg.pipeline.portfolio_beta > 0.0 {
        eprintln!(
            "warning: portfolio.beta = {} > 0 rewards correlated symbols",
            cfg.pipeline.portfolio_beta
        );
    }
    let mut series = Vec::new();
    let mut data_hashes = Vec::new();
    for s in &cfg.symbols {
        let bytes = std::fs::read(&s.file).map_err(|e| CliError::Data(format!("{}: {e}", s.file.display())))?;
        data_hashes.push((s.name.clone(), sha256_hex(&bytes)));
        let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8", s.file.display())))?;
        series.push(nsw_core::market_data::parse_candles(&text, &s.name, cfg.frame)?);
    }
    let aligned = align(&series);
    if aligned.first().is_none_or(|s| s.is_empty()) {
        return Err(CliError::Data("candle files share no timestamps".into()));
    }
    let instruments: Vec<_> = cfg.symbols.iter().map(|s| s.instrument).collect();
    let result = run(&aligned, &instruments, &cfg.pipeline, &cfg.exec, cfg.seed)?;

    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let statement = write_statement(&result.statement);
    write_out(&cfg.out, "statement.txt", &statement)?;
    write_out(&cfg.out, "equity.csv", &result.equity.to_csv())?;
    let summary = summarize(&result.statement).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_out(&cfg.out, "summary.txt", &summary.to_text())?;
    let table1 = match result.statement.period() {
        Some((from, to)) => table1_report(&result.statement, from, to)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .to_text(),
        None => "no closed trades\n".to_string(),
    };
    write_out(&cfg.out, "table1.txt", &table1)?;
    let names: Vec<String> = cfg.symbols.iter().map(|s| s.name.clone()).collect();
    write_out(&cfg.out, "allocations.csv", &result.allocations_csv(&names))?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "config = {}", config.display());
    let _ = writeln!(manifest, "config_sha256 = {}", sha256_hex(&raw));
    let _ = writeln!(manifest, "seed = {}", cfg.seed);
    let _ = writeln!(manifest, "threads = {}", cfg.exec.threads);
    for (name, h) in &data_hashes {
        let _ = writeln!(manifest, "data_sha256.{name} = {h}");
    }
    let _ = writeln!(manifest, "statement_sha256 = {}", sha256_hex(statement.as_bytes()));
    let _ = writeln!(manifest, "bars = {}", aligned[0].len());
    let _ = writeln!(manifest, "densities = {}", result.densities);
    let _ = writeln!(manifest, "gate_openings = {}", result.gate_openings);
    write_out(&cfg.out, "manifest.txt", &manifest)?;
    emit(&summary.to_text())
}

fn cmd_analyze(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let st = parse_statement(&text)?;
    let summary = summarize(&st)?;
    emit(&summary.to_text())
}

fn cmd_chaos(path: &Path, qmax: usize, degree: usize, frame: i64, combo_s: &str) -> Result<(), CliError> {
    if qmax == 0 || qmax > MAX_LAG {
        return Err(CliError::Config(format!("--qmax must lie in 1..={MAX_LAG}, got {qmax}")));
    }
    let values = base_values(path, frame, combo(combo_s)?)?;
    let v = chaos_verdict(&values, qmax, degree, &ScreenConfig::default()).map_err(|e| CliError::Data(e.to_string()))?;
    emit(&v.to_csv())
}

fn cmd_dump_wavelet(path: &Path, levels: usize, frame: i64, combo_s: &str) -> Result<(), CliError> {
    let values = base_values(path, frame, combo(combo_s)?)?;
    let p = decompose(&values, levels, &FilterBank::haar()).map_err(|e| CliError::Data(e.to_string()))?;
    emit(&p.to_csv())
}

fn cmd_dump_density(config: &Path, symbol: Option<String>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let sym = match symbol {
        Some(name) => cfg
            .symbols
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CliError::Config(format!("--symbol: `{name}` is not configured")))?,
        None => &cfg.symbols[0],
    };
    if !sym.file.is_file() {
        return Err(CliError::Data(format!("candle file not found: {}", sym.file.display())));
    }
    let bars = load_candles(&sym.file, &sym.name, cfg.frame)?;
    let values = base_series(&bars, cfg.pipeline.combo)?.values;
    let d = last_density(&values, &cfg.pipeline).ok_or_else(|| {
        CliError::Runtime(format!(
            "no density synthesized: {} bars, one synthesis every {} model updates",
            values.len(),
            cfg.pipeline.sde.horizon
        ))
    })?;
    emit(&d.to_csv())
}

fn cmd_synth(out: &Path, symbols: &[String], bars: usize, frame: i64, seed: u64) -> Result<(), CliError> {
    if bars == 0 || frame <= 0 {
        return Err(CliError::Config("--bars and --frame must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (i, s) in symbols.iter().enumerate() {
        let start = if s.starts_with("usd") { 80.0 } else { 1.3 };
        let series = synthetic_series(s, bars, start, 2e-4, frame, 1_293_840_000, seed.wrapping_add(i as u64));
        write_out(out, &format!("{s}.csv"), &write_candles(&series))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::Backtest { config, out, seed } => cmd_backtest(&config, out, seed),
        Cmd::AnalyzeStatement { statement } => cmd_analyze(&statement),
        Cmd::ChaosScreen {
            candles,
            qmax,
            degree,
            frame,
            combo,
        } => cmd_chaos(&candles, qmax, degree, frame, &combo),
        Cmd::DumpWavelet {
            candles,
            levels,
            frame,
            combo,
        } => cmd_dump_wavelet(&candles, levels, frame, &combo),
        Cmd::DumpDensity { config, symbol } => cmd_dump_density(&config, symbol),
        Cmd::Synth {
            out,
            symbols,
            bars,
            frame,
            seed,
        } => cmd_synth(&out, &symbols, bars, frame, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nsw: {e}");
            ExitCode::from(e.code())
        }
    }
}

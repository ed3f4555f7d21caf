use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nsw");

fn nsw(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn nsw")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// Candles whose open, high, low and close all equal `values[i]`.
fn flat_candles(path: &Path, values: &[f64]) {
    let mut text = String::from("timestamp,open,high,low,close,volume\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{},{v},{v},{v},{v},1\n", 1_300_000_000 + 60 * i as i64));
    }
    fs::write(path, text).unwrap();
}

fn small_run(dir: &Path, extra: &str) -> PathBuf {
    let data = dir.join("data");
    let o = nsw(&["synth", "--out", data.to_str().unwrap(), "--symbols", "eurusd,usdjpy", "--bars", "2500"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "symbols = [\"eurusd\", \"usdjpy\"]\n\
             files.eurusd = \"data/eurusd.csv\"\n\
             files.usdjpy = \"data/usdjpy.csv\"\n\
             digits.usdjpy = 3\n\
             model.horizon = 120\n\
             run.seed = 7\n{extra}"
        ),
    )
    .unwrap();
    cfg
}

fn listing(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(listing(&p));
        }
        out.push(p);
    }
    out.sort();
    out
}

#[test]
fn backtest_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "");
    let before = listing(dir.path());
    let out = dir.path().join("out");
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("Closed Trade P/L:"));
    for f in ["statement.txt", "equity.csv", "summary.txt", "table1.txt", "allocations.csv", "manifest.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    let hash = manifest
        .lines()
        .find_map(|l| l.strip_prefix("config_sha256 = "))
        .expect("config hash");
    assert_eq!(hash.len(), 64);
    assert!(manifest.contains("seed = 7\n"));
    assert!(manifest.contains(&format!("version = {}\n", env!("CARGO_PKG_VERSION"))));

    // Everything new lives under the output directory.
    let after = listing(dir.path());
    assert!(after.iter().filter(|p| !before.contains(p)).all(|p| p.starts_with(&out)));

    let statement = fs::read(out.join("statement.txt")).unwrap();
    let again = dir.path().join("again");
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&o), 0);
    assert_eq!(statement, fs::read(again.join("statement.txt")).unwrap());
    assert!(fs::read_to_string(again.join("manifest.txt")).unwrap().contains("seed = 9\n"));

    // The written statement reads back.
    let o = nsw(&["analyze-statement", "--statement", out.join("statement.txt").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_candle_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "");
    fs::remove_file(dir.path().join("data/usdjpy.csv")).unwrap();
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("usdjpy.csv"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_parameter_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "risk.alpha1 = 0.7\n");
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("risk.alpha1"), "{}", stderr(&o));

    let cfg = small_run(dir.path(), "exec.tp_mlut = 2\n");
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("exec.tp_mlut"));
}

#[test]
fn positive_beta_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "portfolio.beta = 0.25\n");
    let o = nsw(&["backtest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn analyze_statement_fixture() {
    let o = nsw(&["analyze-statement", "--statement", fixture("app1_statement.txt").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("Closed Trade P/L:") && l.ends_with(" 7 220.22")), "{text}");
    assert!(text.contains("Probability of profitable trade:"));
}

#[test]
fn analyze_statement_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = nsw(&["analyze-statement", "--statement", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "Closed Transactions:\n12\t2011.08.10 16:34\tbuy\tnot-a-size\teurusd\n").unwrap();
    let o = nsw(&["analyze-statement", "--statement", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let deposit = dir.path().join("deposit.txt");
    fs::write(
        &deposit,
        "Closed Transactions:\n1\t2011.08.10 16:34\tbalance\tDeposit\t\t\t\t\t\t\t\t\t\t5 000.00\n",
    )
    .unwrap();
    let o = nsw(&["analyze-statement", "--statement", deposit.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("Total Trades:") && l.ends_with(" 0")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("Balance:") && l.ends_with(" 5 000.00")));
}

#[test]
fn chaos_screen_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut x = 0.4;
    let orbit: Vec<f64> = (0..600)
        .map(|_| {
            x = 3.618 * x * (1.0 - x);
            x
        })
        .collect();
    let logistic = dir.path().join("logistic.csv");
    flat_candles(&logistic, &orbit);
    let o = nsw(&["chaos-screen", "--candles", logistic.to_str().unwrap(), "--qmax", "3", "--degree", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("q,residual,fixed_points,moduli,verdict\n"));
    assert!(text.contains("chaotic-preconditions"), "{text}");

    // Hash noise: deterministic, no usable one-step structure.
    let noise: Vec<f64> = (0..1000)
        .map(|i| {
            let s = (i as f64 * 12.9898).sin() * 43_758.545_3;
            1.0 + 0.01 * (s - s.floor() - 0.5)
        })
        .collect();
    let noisy = dir.path().join("noise.csv");
    flat_candles(&noisy, &noise);
    let o = nsw(&["chaos-screen", "--candles", noisy.to_str().unwrap(), "--qmax", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(",stochastic")));

    let o = nsw(&["chaos-screen", "--candles", noisy.to_str().unwrap(), "--qmax", "6"]);
    assert_eq!(code(&o), 1);

    let o = nsw(&["chaos-screen", "--candles", dir.path().join("nope.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "");
    let o = nsw(&["dump-wavelet", "--candles", dir.path().join("data/eurusd.csv").to_str().unwrap(), "--levels", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("level,index,kind,value\n"));

    let o = nsw(&["dump-density", "--config", cfg.to_str().unwrap(), "--symbol", "usdjpy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<(f64, f64)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let (x, f) = l.split_once(',').unwrap();
            (x.parse().unwrap(), f.parse().unwrap())
        })
        .collect();
    assert!(rows.len() >= 64);
    let mass: f64 = rows.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    assert!((mass - 1.0).abs() < 1e-9, "{mass}");

    let o = nsw(&["dump-density", "--config", cfg.to_str().unwrap(), "--symbol", "gbpusd"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nsw(&["backtest"])), 1);
    assert_eq!(code(&nsw(&["frobnicate"])), 1);
    assert_eq!(code(&nsw(&["--help"])), 0);
}

#[test]
fn shipped_example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/example.toml");
    let cfg = nsw_core::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.frame, 60);
    assert_eq!(cfg.pipeline.p1, 5);
    assert_eq!(cfg.pipeline.alpha, 0.15);
    assert_eq!(cfg.pipeline.alpha1, 0.15);
}

//! Run configuration: one TOML file of flat dotted keys. Unknown keys are
//! rejected.

use crate::backtest::{ExecConfig, Instrument, PipelineConfig};
use crate::market_data::PriceCombo;
use crate::sde::Scaling;
use crate::signals::BlockKind;
use crate::stationary::DensityForm;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing config key `{0}`")]
    Missing(String),
    #[error("`{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("`{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolConfig {
    pub name: String,
    pub file: PathBuf,
    pub instrument: Instrument,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub symbols: Vec<SymbolConfig>,
    /// Bar period in seconds.
    pub frame: i64,
    /// Levels for pyramid dumps.
    pub levels: usize,
    pub pipeline: PipelineConfig,
    pub exec: ExecConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Keys {
    map: BTreeMap<String, Value>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(v),
            Some(Value::Integer(v)) => Ok(v as f64),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a number" }),
        }
    }

    fn int(&mut self, key: &str, default: i64) -> Result<i64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(v)) => Ok(v),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "an integer" }),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        let v = self.int(key, default as i64)?;
        usize::try_from(v).map_err(|_| ConfigError::Invalid {
            key: key.into(),
            msg: format!("must be non-negative, got {v}"),
        })
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a string" }),
        }
    }

    fn strings(&mut self, key: &str) -> Result<Option<Vec<String>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    _ => Err(ConfigError::Type { key: key.into(), expected: "an array of strings" }),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "an array of strings" }),
        }
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(key, msg))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative file paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        let mut k = Keys { map };

        let names = k.strings("symbols")?.ok_or_else(|| ConfigError::Missing("symbols".into()))?;
        if names.is_empty() {
            return Err(invalid("symbols", "at least one symbol is required"));
        }
        let mut symbols = Vec::new();
        for name in &names {
            if symbols.iter().any(|s: &SymbolConfig| &s.name == name) {
                return Err(invalid("symbols", format!("`{name}` listed twice")));
            }
            let fkey = format!("files.{name}");
            let file = k.string(&fkey)?.ok_or(ConfigError::Missing(fkey))?;
            let dkey = format!("digits.{name}");
            let digits = k.usize(&dkey, 5)?;
            check(digits <= 10, &dkey, "must be at most 10")?;
            let skey = format!("spread.{name}");
            let spread = k.f64(&skey, 20.0 * 10f64.powi(-(digits as i32)))?;
            check(spread >= 0.0 && spread.is_finite(), &skey, "must be non-negative")?;
            symbols.push(SymbolConfig {
                name: name.clone(),
                file: base.join(file),
                instrument: Instrument { spread, digits: digits as u8 },
            });
        }

        let frame = k.int("data.frame", 60)?;
        check(frame > 0, "data.frame", "must be positive")?;
        let combo = match k.string("data.combo")? {
            None => PriceCombo::default(),
            Some(s) => PriceCombo::parse(&s).ok_or_else(|| invalid("data.combo", format!("unknown combo `{s}`")))?,
        };

        let d = PipelineConfig::default();
        let mut p = PipelineConfig { combo, ..d.clone() };
        p.p1 = k.usize("wavelet.p1", d.p1)?;
        check(p.p1 >= 1, "wavelet.p1", "must be >= 1")?;
        let levels = k.usize("wavelet.levels", 2)?;
        check(levels >= 1, "wavelet.levels", "must be >= 1")?;

        p.sde.horizon = k.usize("model.horizon", d.sde.horizon)?;
        check(p.sde.horizon >= 2, "model.horizon", "must be >= 2")?;
        p.sde.drift_order = k.usize("model.drift_order", d.sde.drift_order)?;
        p.sde.diffusion_order = k.usize("model.diffusion_order", d.sde.diffusion_order)?;
        check(p.sde.drift_order <= 8, "model.drift_order", "must be at most 8")?;
        check(p.sde.diffusion_order <= 8, "model.diffusion_order", "must be at most 8")?;
        p.sde.beta = k.f64("model.beta", d.sde.beta)?;
        check(p.sde.beta > 0.0 && p.sde.beta < 1.0, "model.beta", "must lie in (0, 1)")?;
        p.sde.g_floor = k.f64("model.g_floor", d.sde.g_floor)?;
        check(p.sde.g_floor > 0.0, "model.g_floor", "must be positive")?;
        if let Some(s) = k.string("model.scaling")? {
            p.sde.scaling = match s.as_str() {
                "running" => Scaling::Running,
                "identity" => Scaling::Identity,
                _ => return Err(invalid("model.scaling", "expected `running` or `identity`")),
            };
        }

        if let Some(s) = k.string("density.form")? {
            p.density_form = match s.as_str() {
                "printed" => DensityForm::Printed,
                "fokker-planck" => DensityForm::FokkerPlanck,
                _ => return Err(invalid("density.form", "expected `printed` or `fokker-planck`")),
            };
        }
        p.grid_points = k.usize("density.points", d.grid_points)?;
        check(p.grid_points >= 64, "density.points", "must be >= 64")?;
        p.grid_width = k.f64("density.width", d.grid_width)?;
        check(p.grid_width > 0.0, "density.width", "must be positive")?;

        p.alpha = k.f64("risk.alpha", d.alpha)?;
        check(p.alpha > 0.0 && p.alpha < 1.0, "risk.alpha", "must lie in (0, 1)")?;
        p.alpha1 = k.f64("risk.alpha1", d.alpha1)?;
        check(p.alpha1 > 0.0 && p.alpha1 < 0.5, "risk.alpha1", "must lie in (0, 0.5)")?;

        if let Some(blocks) = k.strings("blocks")? {
            p.blocks = blocks
                .iter()
                .map(|b| BlockKind::parse(b).map_err(|e| invalid("blocks", e.to_string())))
                .collect::<Result<_, _>>()?;
        }
        p.w0 = k.f64("fusion.w0", d.w0)?;
        p.beta_w = k.f64("fusion.beta_w", d.beta_w)?;
        check(p.beta_w > 0.0, "fusion.beta_w", "must be positive")?;
        p.compensation = k.f64("fusion.compensation", d.compensation)?;
        check(p.compensation > 0.0 && p.compensation <= 1.0, "fusion.compensation", "must lie in (0, 1]")?;
        p.accuracy_window = k.usize("fusion.window", d.accuracy_window)?;
        check(p.accuracy_window >= 1, "fusion.window", "must be >= 1")?;
        p.coupling_window = k.usize("coupling.window", d.coupling_window)?;
        check(p.coupling_window >= 3, "coupling.window", "must be >= 3")?;
        p.s_min = k.f64("coupling.s_min", d.s_min)?;
        check(p.s_min >= 0.0, "coupling.s_min", "must be non-negative")?;

        p.portfolio_beta = k.f64("portfolio.beta", d.portfolio_beta)?;
        check(p.portfolio_beta.is_finite(), "portfolio.beta", "must be finite")?;
        p.bucket_secs = k.int("portfolio.bucket_secs", d.bucket_secs)?;
        check(p.bucket_secs > 0, "portfolio.bucket_secs", "must be positive")?;
        p.n_min = k.usize("portfolio.n_min", d.n_min)?;
        p.t_max = k.usize("portfolio.t_max", d.t_max)?;
        check(p.n_min >= 1 && p.t_max >= 1, "portfolio.n_min", "n_min and t_max must be >= 1")?;

        let e = ExecConfig::default();
        let exec = ExecConfig {
            tp_mult: k.f64("exec.tp_mult", e.tp_mult)?,
            trail_mult: k.f64("exec.trail_mult", e.trail_mult)?,
            emergency_share: k.f64("exec.emergency_share", e.emergency_share)?,
            second_pos_delay: k.usize("exec.second_pos_delay", e.second_pos_delay)?,
            slow_window: k.usize("exec.slow_window", p.sde.horizon)?,
            initial_deposit: k.f64("exec.initial_deposit", e.initial_deposit)?,
            risk: k.f64("exec.risk", e.risk)?,
            leverage: k.f64("exec.leverage", e.leverage)?,
            contract: k.f64("exec.contract", e.contract)?,
            threads: k.usize("run.threads", e.threads)?,
        };
        check(exec.tp_mult > 0.0, "exec.tp_mult", "must be positive")?;
        check(exec.trail_mult > 0.0, "exec.trail_mult", "must be positive")?;
        check(
            exec.emergency_share > 0.0 && exec.emergency_share < 1.0,
            "exec.emergency_share",
            "must lie in (0, 1)",
        )?;
        check(exec.slow_window >= 2, "exec.slow_window", "must be >= 2")?;
        check(exec.initial_deposit > 0.0, "exec.initial_deposit", "must be positive")?;
        check(exec.risk > 0.0, "exec.risk", "must be positive")?;
        check(exec.leverage > 0.0, "exec.leverage", "must be positive")?;
        check(exec.contract > 0.0, "exec.contract", "must be positive")?;

        let seed = k.int("run.seed", 0)?;
        let seed = u64::try_from(seed).map_err(|_| invalid("run.seed", "must be non-negative"))?;
        let out = base.join(k.string("run.out")?.unwrap_or_else(|| "out".into()));

        if let Some(key) = k.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        Ok(Self {
            symbols,
            frame,
            levels,
            pipeline: p,
            exec,
            seed,
            out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
symbols = ["eurusd", "usdjpy"]
files.eurusd = "eurusd.csv"
files.usdjpy = "data/usdjpy.csv"
digits.usdjpy = 3
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL, Path::new("/tmp/run")).unwrap();
        assert_eq!(c.symbols.len(), 2);
        assert_eq!(c.symbols[1].file, PathBuf::from("/tmp/run/data/usdjpy.csv"));
        assert_eq!(c.symbols[1].instrument.digits, 3);
        assert!((c.symbols[1].instrument.spread - 0.02).abs() < 1e-12);
        assert_eq!(c.pipeline.p1, 5);
        assert_eq!(c.pipeline.sde.horizon, 240);
        assert_eq!(c.exec.slow_window, 240);
        assert_eq!(c.pipeline.alpha1, 0.15);
        assert_eq!(c.out, PathBuf::from("/tmp/run/out"));
    }

    #[test]
    fn nested_tables_equal_dotted_keys() {
        let nested = format!("{MINIMAL}\n[risk]\nalpha = 0.1\n[exec]\ntp_mult = 1.5\n");
        let dotted = format!("{MINIMAL}\nrisk.alpha = 0.1\nexec.tp_mult = 1.5\n");
        assert_eq!(
            RunConfig::parse(&nested, Path::new(".")).unwrap(),
            RunConfig::parse(&dotted, Path::new(".")).unwrap()
        );
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{MINIMAL}\nexec.tp_mlut = 2\n");
        assert_eq!(
            RunConfig::parse(&text, Path::new(".")),
            Err(ConfigError::UnknownKey("exec.tp_mlut".into()))
        );
        let text = format!("{MINIMAL}\nspread.gbpusd = 0.0002\n");
        assert_eq!(
            RunConfig::parse(&text, Path::new(".")),
            Err(ConfigError::UnknownKey("spread.gbpusd".into()))
        );
    }

    #[test]
    fn validation_names_the_field() {
        let text = format!("{MINIMAL}\nrisk.alpha1 = 0.7\n");
        match RunConfig::parse(&text, Path::new(".")) {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "risk.alpha1"),
            other => panic!("{other:?}"),
        }
        let text = format!("{MINIMAL}\nexec.tp_mult = \"two\"\n");
        assert!(matches!(RunConfig::parse(&text, Path::new(".")), Err(ConfigError::Type { .. })));
        assert!(matches!(
            RunConfig::parse("symbols = [\"x\"]\n", Path::new(".")),
            Err(ConfigError::Missing(k)) if k == "files.x"
        ));
        let text = format!("{MINIMAL}\nblocks = [\"macd(1,2\"]\n");
        assert!(matches!(RunConfig::parse(&text, Path::new(".")), Err(ConfigError::Invalid { .. })));
    }
}

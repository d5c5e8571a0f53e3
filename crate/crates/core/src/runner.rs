//! Config-driven pipeline: ingest, walk-forward training, backtest and reporting for
//! one of the four approaches, plus parameter sweeps over dotted config keys.
//!
//! | approach | model | target                | activation | noise |
//! |----------|-------|-----------------------|------------|-------|
//! | 1        | MLP   | next-bar return       | tanh       | 0     |
//! | 2        | MLP   | next-bar direction    | tanh       | 0     |
//! | 3        | SAE   | next-bar direction    | swish      | 0.05  |
//! | 4        | SAE   | triple-barrier label  | swish      | 0.05  |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{
    simulate, simulate_tbl, to_positions, write_trades_csv, CostModel, EquityCurve, SignalMode, DEFAULT_CAPITAL,
};
use crate::error::{Error, Result};
use crate::fracdiff::FracDiffConfig;
use crate::ingest::{align_features, format_ts, load_bars, load_feature, resample, write_file, AlignPolicy, BarSeries, FeatureFrame};
use crate::labeling::{LabelSpec, PhiParams};
use crate::metrics::{
    direction_loss, dm_test, ir_ttest, portfolio_equal_weight, render_table, MetricConfig, PerfReport,
};
use crate::sae::{Activation, OutputMode, Predictions, SaeConfig};
use crate::walkforward::{make_splits, run_walkforward, SearchConfig, SplitSummary, Target, WalkForwardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSource {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    pub symbol: String,
    pub bars: PathBuf,
    /// Per-side transaction cost as a fraction.
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub features: Vec<FeatureSource>,
    #[serde(default)]
    pub align: AlignPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiConfig {
    pub delta: f64,
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig { delta: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkForwardParams {
    /// Bars per period.
    pub period_len: usize,
    pub initial_train_periods: usize,
    pub max_train_periods: Option<usize>,
}

impl Default for WalkForwardParams {
    fn default() -> Self {
        // about a calendar month of 15-minute bars in regular US equity sessions
        WalkForwardParams {
            period_len: 546,
            initial_train_periods: 1,
            max_train_periods: Some(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsParams {
    /// Inferred from the out-of-sample timestamps when absent.
    pub periods_per_year: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputParams {
    pub save_models: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub approach: u8,
    #[serde(default)]
    pub seed: u64,
    /// Resample target in minutes; the native frequency is used when absent.
    #[serde(default)]
    pub frequency: Option<u32>,
    #[serde(default = "default_capital")]
    pub initial_capital: f64,
    pub assets: Vec<AssetConfig>,
    pub labels: LabelSpec,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub sae: SaeConfig,
    #[serde(default = "run_fracdiff_defaults")]
    pub fracdiff: FracDiffConfig,
    #[serde(default)]
    pub walkforward: WalkForwardParams,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub metrics: MetricsParams,
    #[serde(default)]
    pub output: OutputParams,
    /// Sweep grid: dotted config key to candidate values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn default_capital() -> f64 {
    DEFAULT_CAPITAL
}

/// Coarser truncation than the library default keeps windows short enough for
/// month-long train slices.
fn run_fracdiff_defaults() -> FracDiffConfig {
    FracDiffConfig {
        tau: 1e-4,
        max_weights: 200,
        ..FracDiffConfig::default()
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Per-approach model defaults, applied underneath the user's settings.
fn approach_defaults(approach: u8) -> Result<toml::Table> {
    let (mode, act, ae, noise) = match approach {
        1 => (OutputMode::Regression, Activation::Tanh, false, 0.0),
        2 => (OutputMode::Binary, Activation::Tanh, false, 0.0),
        3 => (OutputMode::Binary, Activation::Swish, true, 0.05),
        4 => (OutputMode::Ternary, Activation::Swish, true, 0.05),
        other => return Err(config_err(format!("approach must be 1, 2, 3 or 4, got {other}"))),
    };
    let sae = SaeConfig {
        output_mode: mode,
        activation: act,
        use_autoencoder: ae,
        noise_rate: noise,
        ..SaeConfig::default()
    };
    let mut t = toml::Table::new();
    t.insert("sae".into(), toml::Value::try_from(sae).map_err(|e| config_err(e.to_string()))?);
    t.insert(
        "fracdiff".into(),
        toml::Value::try_from(run_fracdiff_defaults()).map_err(|e| config_err(e.to_string()))?,
    );
    Ok(t)
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(config_err(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses user TOML, fills in approach defaults and validates.
    pub fn from_table(user: &toml::Table) -> Result<Self> {
        let approach = user
            .get("approach")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| config_err("`approach` (1-4) is required"))?;
        let approach = u8::try_from(approach).map_err(|_| config_err(format!("approach {approach} out of range")))?;
        let mut merged = approach_defaults(approach)?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        Self::from_table(&user)
    }

    pub fn validate(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(config_err("at least one asset is required"));
        }
        let mut symbols: Vec<&str> = self.assets.iter().map(|a| a.symbol.as_str()).collect();
        symbols.sort_unstable();
        if symbols.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("asset symbols must be unique"));
        }
        if let Some(bad) = self.assets.iter().find(|a| a.symbol.is_empty() || a.symbol.contains(['/', '\\'])) {
            return Err(config_err(format!("invalid asset symbol `{}`", bad.symbol)));
        }
        for a in &self.assets {
            CostModel::new(a.cost)?;
        }
        if self.frequency == Some(0) {
            return Err(config_err("frequency must be >= 1 minute"));
        }
        if !(self.initial_capital > 0.0) {
            return Err(config_err("initial capital must be > 0"));
        }
        let expected = match self.approach {
            1 => (OutputMode::Regression, false),
            2 => (OutputMode::Binary, false),
            3 => (OutputMode::Binary, true),
            4 => (OutputMode::Ternary, true),
            other => return Err(config_err(format!("approach must be 1, 2, 3 or 4, got {other}"))),
        };
        if (self.sae.output_mode, self.sae.use_autoencoder) != expected {
            return Err(config_err(format!(
                "approach {} needs output mode {:?} with use_autoencoder = {}",
                self.approach, expected.0, expected.1
            )));
        }
        if self.approach == 2 && self.sae.noise_rate != 0.0 {
            return Err(config_err("approach 2 trains without noise (sae.noise_rate = 0)"));
        }
        self.labels.validate()?;
        PhiParams::new(self.labels.lambda, self.phi.delta)?;
        self.sae.validate()?;
        self.fracdiff.validate()?;
        if self.search.enabled {
            self.search.validate()?;
        }
        if let Some(p) = self.metrics.periods_per_year {
            MetricConfig::new(p)?;
        }
        let wf = &self.walkforward;
        if wf.period_len == 0 || wf.initial_train_periods == 0 || wf.max_train_periods == Some(0) {
            return Err(config_err("walk-forward period length and counts must be >= 1"));
        }
        Ok(())
    }

    pub fn target(&self) -> Target {
        match self.approach {
            1 => Target::NextReturn,
            2 | 3 => Target::NextSign,
            _ => Target::Tbl {
                spec: self.labels,
                delta: self.phi.delta,
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// SHA-256 of the serialized config.
    pub fn digest(&self) -> Result<String> {
        Ok(text_digest(&self.to_toml()?))
    }

    /// Comment header carried by every output file.
    pub fn header(&self) -> Result<String> {
        Ok(format!("# seed={} config_digest={}\n", self.seed, self.digest()?))
    }
}

/// Parsed but not yet validated config file.
pub type ConfigTable = toml::Table;

/// Hex SHA-256 of a text; the digest written into output headers.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Reads a config file; asset paths are later resolved against its directory.
pub fn load_config(path: &Path) -> Result<(toml::Table, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((table, base))
}

/// Per-asset outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetReport {
    pub symbol: String,
    pub strategy: PerfReport,
    pub benchmark: PerfReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub approach: u8,
    pub assets: Vec<AssetReport>,
    pub portfolio: Option<AssetReport>,
}

impl RunReport {
    /// The headline report: the portfolio when there are several assets.
    pub fn headline(&self) -> &PerfReport {
        self.portfolio.as_ref().map_or(&self.assets[0].strategy, |p| &p.strategy)
    }

    pub fn table(&self) -> String {
        let mut reports = Vec::new();
        for a in self.assets.iter().chain(&self.portfolio) {
            reports.push(a.strategy.clone());
            reports.push(a.benchmark.clone());
        }
        render_table(&reports)
    }
}

/// Years per second, for inferring annualization from timestamps.
const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

pub fn infer_periods_per_year(timestamps: &[i64]) -> Result<f64> {
    if timestamps.len() < 2 {
        return Err(Error::SeriesTooShort {
            required: 2,
            actual: timestamps.len(),
        });
    }
    let span = (timestamps[timestamps.len() - 1] - timestamps[0]) as f64 / SECONDS_PER_YEAR;
    if !(span > 0.0) {
        return Err(Error::Validation("timestamps span no time".into()));
    }
    Ok((timestamps.len() - 1) as f64 / span)
}

/// Everything produced for one asset before it is written out.
pub struct AssetRun {
    pub symbol: String,
    pub bars: BarSeries,
    pub prediction_ts: Vec<i64>,
    pub predictions: Predictions,
    pub splits: Vec<SplitSummary>,
    pub models: Vec<(usize, crate::sae::SaeModel)>,
    pub equity: EquityCurve,
    pub benchmark: EquityCurve,
    pub trades: Option<Vec<crate::backtest::Trade>>,
    pub positions: Vec<i8>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads bars and features for one asset. The close price is always the first
/// feature column.
pub fn load_asset(asset: &AssetConfig, frequency: Option<u32>, base: &Path) -> Result<(BarSeries, FeatureFrame)> {
    let mut bars = load_bars(&resolve(base, &asset.bars), &asset.symbol)?;
    if let Some(f) = frequency {
        bars = resample(&bars, f)?;
    }
    let raw: Vec<_> = asset
        .features
        .iter()
        .map(|f| load_feature(&resolve(base, &f.path), &f.name))
        .collect::<Result<_>>()?;
    let extra = align_features(&bars, &raw, asset.align)?;
    let first = bars
        .timestamps
        .iter()
        .position(|t| Some(t) == extra.timestamps.first())
        .unwrap_or(0);
    let rows: Vec<usize> = extra
        .timestamps
        .iter()
        .map(|t| bars.timestamps.binary_search(t).expect("aligned timestamps come from the bars"))
        .collect();
    let contiguous = rows.windows(2).all(|w| w[1] == w[0] + 1);
    if !contiguous {
        return Err(Error::Validation(format!(
            "{}: feature alignment dropped interior bars; use forward-fill alignment",
            asset.symbol
        )));
    }
    let bars = bars.slice(first..first + rows.len());
    let mut names = vec!["close".to_string()];
    names.extend(extra.names.iter().cloned());
    let mut cols = vec![bars.close.clone()];
    cols.extend((0..extra.width()).map(|j| extra.column(j)));
    let frame = FeatureFrame::from_columns(names, bars.timestamps.clone(), &cols)?;
    Ok((bars, frame))
}

/// Runs the full pipeline on in-memory data.
pub fn run_asset(cfg: &RunConfig, symbol: &str, cost: f64, bars: &BarSeries, features: &FeatureFrame) -> Result<AssetRun> {
    let wf = &cfg.walkforward;
    let plan = make_splits(bars.len(), wf.period_len, wf.max_train_periods, wf.initial_train_periods)
        .map_err(|e| e.in_module("walkforward"))?;
    let wcfg = WalkForwardConfig {
        fracdiff: cfg.fracdiff.clone(),
        sae: cfg.sae.clone(),
        target: cfg.target(),
        search: cfg.search.clone(),
        seed: cfg.seed,
    };
    let res = run_walkforward(bars, features, &plan, &wcfg).map_err(|e| e.in_module("walkforward"))?;

    let start = res.indices[0];
    let end = res.indices[res.indices.len() - 1] + 1;
    let oos = bars.slice(start..end);
    let costs = CostModel::new(cost)?;
    let (equity, trades, positions) = if cfg.approach == 4 {
        let signals = to_positions(&res.predictions, SignalMode::Ternary)?;
        let bt = simulate_tbl(&signals, &oos, &cfg.labels, costs, cfg.initial_capital)
            .map_err(|e| e.in_module("backtest"))?;
        // positions actually held, for the direction-loss comparison
        let mut held = vec![0i8; oos.len()];
        for t in &bt.trades {
            held[t.entry_index..t.exit_index].fill(t.direction);
        }
        (bt.equity, Some(bt.trades), held)
    } else {
        let mode = if cfg.approach == 1 { SignalMode::RegressionSign } else { SignalMode::Binary };
        let pos = to_positions(&res.predictions, mode)?;
        let eq = simulate(&pos, &oos.close, &oos.timestamps, costs, cfg.initial_capital)
            .map_err(|e| e.in_module("backtest"))?;
        (eq, None, pos)
    };
    let benchmark = simulate(&vec![1; oos.len()], &oos.close, &oos.timestamps, costs, cfg.initial_capital)?;
    Ok(AssetRun {
        symbol: symbol.to_string(),
        prediction_ts: res.timestamps.clone(),
        predictions: res.predictions.clone(),
        splits: res.splits.iter().map(|s| s.summary()).collect(),
        models: res
            .splits
            .iter()
            .filter_map(|s| s.model.clone().map(|m| (s.split.index, m)))
            .collect(),
        bars: oos,
        equity,
        benchmark,
        trades,
        positions,
    })
}

/// Strategy and buy-and-hold reports, with the two comparison tests filled in.
fn asset_report(
    symbol: &str,
    equity: &EquityCurve,
    benchmark: &EquityCurve,
    positions: Option<&[i8]>,
    n_trades: Option<usize>,
    ppy: f64,
) -> Result<AssetReport> {
    let mcfg = MetricConfig::new(ppy)?;
    let mut strategy = PerfReport::from_curve(symbol, equity, mcfg)?;
    let mut bench = PerfReport::from_curve(&format!("{symbol} buy&hold"), benchmark, mcfg)?;
    strategy.n_trades = n_trades;
    bench.n_trades = Some(1);
    let bench_returns = benchmark.returns();
    let strat_returns = equity.returns();
    let strat_loss = match positions {
        Some(p) => direction_loss(&p[..bench_returns.len()], &bench_returns),
        None => strat_returns.iter().map(|r| if *r < 0.0 { 1.0 } else { 0.0 }).collect(),
    };
    let bench_loss: Vec<f64> = bench_returns.iter().map(|r| if *r < 0.0 { 1.0 } else { 0.0 }).collect();
    strategy.dm = dm_test(&strat_loss, &bench_loss, true).ok();
    strategy.ir_test = ir_ttest(&strat_returns, &bench_returns, ppy, true).ok();
    Ok(AssetReport {
        symbol: symbol.to_string(),
        strategy,
        benchmark: bench,
    })
}

fn csv_predictions(header: &str, ts: &[i64], preds: &Predictions) -> String {
    let mut out = String::from(header);
    out.push_str("timestamp,prediction\n");
    for (t, p) in ts.iter().zip(preds.as_f64()) {
        let _ = writeln!(out, "{},{}", format_ts(*t), p);
    }
    out
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

/// Moves everything from `staging` into `out`, replacing earlier outputs.
fn publish(staging: &Path, out: &Path) -> Result<()> {
    let entries = std::fs::read_dir(staging).map_err(|e| Error::io(staging, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(staging, e))?;
        let target = out.join(entry.file_name());
        if target.is_dir() {
            std::fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        std::fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}

/// Runs one approach and writes its artifacts into `out`. Files are staged in a
/// temporary directory and only moved into place once everything succeeded.
pub fn run_approach(cfg: &RunConfig, base: &Path, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".incomplete-")
        .tempdir_in(out)
        .map_err(|e| Error::io(out, e))?;
    let header = cfg.header()?;
    let digest = cfg.digest()?;

    let runs: Vec<AssetRun> = cfg
        .assets
        .iter()
        .map(|a| {
            log::info!("{}: loading data", a.symbol);
            let (bars, frame) = load_asset(a, cfg.frequency, base).map_err(|e| e.in_module("ingest"))?;
            log::info!("{}: {} bars, {} features", a.symbol, bars.len(), frame.width());
            run_asset(cfg, &a.symbol, a.cost, &bars, &frame)
        })
        .collect::<Result<_>>()?;

    let ppy = match cfg.metrics.periods_per_year {
        Some(p) => p,
        None => infer_periods_per_year(&runs[0].equity.timestamps)?,
    };
    let mut assets = Vec::new();
    for r in &runs {
        let dir = staging.path().join(&r.symbol);
        write_file(&dir.join("predictions.csv"), csv_predictions(&header, &r.prediction_ts, &r.predictions).as_bytes())?;
        let splits = serde_json::json!({ "seed": cfg.seed, "config_digest": digest, "splits": r.splits });
        write_file(&dir.join("splits.json"), json(&splits)?.as_bytes())?;
        r.equity.write_csv(&dir.join("equity.csv"), &header)?;
        r.benchmark.write_csv(&dir.join("benchmark_equity.csv"), &header)?;
        if let Some(trades) = &r.trades {
            write_trades_csv(trades, &dir.join("trades.csv"), &header)?;
        }
        if cfg.output.save_models {
            for (i, m) in &r.models {
                m.save(&dir.join("models").join(format!("split_{i:03}.model")), &header)?;
            }
        }
        let n_trades = r.trades.as_ref().map(Vec::len).or_else(|| {
            Some(r.positions.windows(2).filter(|w| w[1] != w[0] && w[1] != 0).count() + usize::from(r.positions[0] != 0))
        });
        assets.push(
            asset_report(&r.symbol, &r.equity, &r.benchmark, Some(&r.positions), n_trades, ppy)
                .map_err(|e| e.in_module("metrics"))?,
        );
    }

    let portfolio = if runs.len() > 1 {
        let strat: Vec<EquityCurve> = runs.iter().map(|r| r.equity.clone()).collect();
        let bench: Vec<EquityCurve> = runs.iter().map(|r| r.benchmark.clone()).collect();
        let p = portfolio_equal_weight(&strat, cfg.initial_capital).map_err(|e| e.in_module("metrics"))?;
        let b = portfolio_equal_weight(&bench, cfg.initial_capital).map_err(|e| e.in_module("metrics"))?;
        p.write_csv(&staging.path().join("portfolio_equity.csv"), &header)?;
        b.write_csv(&staging.path().join("portfolio_benchmark_equity.csv"), &header)?;
        let n_trades = assets.iter().filter_map(|a| a.strategy.n_trades).sum();
        Some(asset_report("portfolio", &p, &b, None, Some(n_trades), ppy).map_err(|e| e.in_module("metrics"))?)
    } else {
        None
    };

    let report = RunReport {
        seed: cfg.seed,
        config_digest: digest,
        approach: cfg.approach,
        assets,
        portfolio,
    };
    write_file(&staging.path().join("config.toml"), format!("{header}{}", cfg.to_toml()?).as_bytes())?;
    write_file(&staging.path().join("report.json"), json(&report)?.as_bytes())?;
    write_file(&staging.path().join("report.txt"), format!("{header}{}", report.table()).as_bytes())?;
    publish(staging.path(), out)?;
    Ok(report)
}

/// One sweep cell: the overrides applied and the config they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub values: Vec<(String, toml::Value)>,
    pub config: RunConfig,
}

/// Expands the `[sweep]` grid of `user` into cells, validating every key up front.
/// Cell `i` runs with seed `seed ^ i`.
pub fn sweep_cells(user: &toml::Table) -> Result<Vec<SweepCell>> {
    let base = RunConfig::from_table(user)?;
    if base.sweep.is_empty() {
        return Err(config_err("the config has no [sweep] grid"));
    }
    let keys: Vec<&String> = base.sweep.keys().collect();
    if let Some((k, _)) = base.sweep.iter().find(|(_, v)| v.is_empty()) {
        return Err(config_err(format!("sweep key `{k}` has no values")));
    }
    let mut cells = Vec::new();
    let total: usize = base.sweep.values().map(Vec::len).product();
    for index in 0..total {
        let mut rem = index;
        let mut values = Vec::new();
        // keys in sorted order, the last varies fastest
        let mut picks = vec![0; keys.len()];
        for (slot, k) in keys.iter().enumerate().rev() {
            let n = base.sweep[*k].len();
            picks[slot] = rem % n;
            rem /= n;
        }
        let mut table = user.clone();
        table.remove("sweep");
        for (slot, k) in keys.iter().enumerate() {
            if k.as_str() == "sweep" || k.starts_with("sweep.") {
                return Err(config_err("the sweep grid cannot sweep itself"));
            }
            let v = base.sweep[*k][picks[slot]].clone();
            set_dotted(&mut table, k, v.clone())?;
            values.push(((*k).clone(), v));
        }
        let seed = base.seed ^ index as u64;
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let config = RunConfig::from_table(&table).map_err(|e| config_err(format!("sweep cell {index}: {e}")))?;
        cells.push(SweepCell { index, values, config });
    }
    Ok(cells)
}

fn render_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every cell of the sweep grid (in parallel on the current rayon pool) and
/// writes `sweep.csv`, one row per cell in grid order.
pub fn sweep(user: &toml::Table, base: &Path, out: &Path) -> Result<Vec<(SweepCell, RunReport)>> {
    let cells = sweep_cells(user)?;
    let master = RunConfig::from_table(user)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results: Vec<Result<RunReport>> = cells
        .par_iter()
        .map(|c| run_approach(&c.config, base, &out.join(format!("cell_{:03}", c.index))))
        .collect();
    let mut done = Vec::with_capacity(cells.len());
    for (c, r) in cells.into_iter().zip(results) {
        let r = r.map_err(|e| config_err(format!("sweep cell {}: {e}", c.index)))?;
        done.push((c, r));
    }

    let mut csv = master.header()?;
    let keys: Vec<String> = master.sweep.keys().cloned().collect();
    let _ = writeln!(csv, "{},IR,IR_star2,ARC,ASD,MDD,MLD_years,n_trades", keys.join(","));
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for (c, r) in &done {
        let h = r.headline();
        let vals: Vec<String> = c.values.iter().map(|(_, v)| render_value(v)).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            vals.join(","),
            opt(h.ir),
            opt(h.ir_star2),
            h.arc,
            h.asd,
            h.mdd,
            h.mld_years,
            h.n_trades.map_or(String::new(), |n| n.to_string())
        );
    }
    let tmp = out.join(".sweep.csv.tmp");
    write_file(&tmp, csv.as_bytes())?;
    std::fs::rename(&tmp, out.join("sweep.csv")).map_err(|e| Error::io(out, e))?;
    Ok(done)
}

/// Report for equity files on disk. Each curve is compared with `baseline` when
/// given, using the sign of each bar's return as the direction loss.
pub fn report_from_files(
    equity: &[PathBuf],
    baseline: Option<&Path>,
    trades: Option<&Path>,
    periods_per_year: Option<f64>,
) -> Result<(Vec<PerfReport>, String)> {
    if equity.is_empty() {
        return Err(Error::Empty("no equity files given".into()));
    }
    let curves: Vec<EquityCurve> = equity.iter().map(|p| EquityCurve::read_csv(p)).collect::<Result<_>>()?;
    let ppy = match periods_per_year {
        Some(p) => p,
        None => infer_periods_per_year(&curves[0].timestamps)?,
    };
    let mcfg = MetricConfig::new(ppy)?;
    let base = baseline.map(EquityCurve::read_csv).transpose()?;
    let n_trades = trades.map(count_trades).transpose()?;
    let mut reports = Vec::new();
    for (p, c) in equity.iter().zip(&curves) {
        let name = p.file_stem().map_or("equity".into(), |s| s.to_string_lossy().into_owned());
        let mut r = PerfReport::from_curve(&name, c, mcfg)?;
        r.n_trades = n_trades;
        if let Some(b) = &base {
            let joined = portfolio_pair(c, b)?;
            let loss = |x: &[f64]| x.iter().map(|r| if *r < 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>();
            r.dm = dm_test(&loss(&joined.0), &loss(&joined.1), true).ok();
            r.ir_test = ir_ttest(&joined.0, &joined.1, ppy, true).ok();
        }
        reports.push(r);
    }
    if let Some(b) = &base {
        reports.push(PerfReport::from_curve("baseline", b, mcfg)?);
    }
    let table = render_table(&reports);
    Ok((reports, table))
}

/// Returns of two curves over their shared timestamps.
fn portfolio_pair(a: &EquityCurve, b: &EquityCurve) -> Result<(Vec<f64>, Vec<f64>)> {
    let common: Vec<i64> = a.timestamps.iter().filter(|t| b.timestamps.binary_search(t).is_ok()).copied().collect();
    if common.len() < 2 {
        return Err(Error::Validation("curves share fewer than two timestamps".into()));
    }
    let pick = |c: &EquityCurve| -> Vec<f64> {
        common.iter().map(|t| c.values[c.timestamps.binary_search(t).expect("common timestamp")]).collect()
    };
    Ok((crate::stats::simple_returns(&pick(a)), crate::stats::simple_returns(&pick(b))))
}

fn count_trades(path: &Path) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut n = 0;
    for rec in reader.records() {
        rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
approach = 4
seed = 3

[[assets]]
symbol = "SYN"
bars = "bars.csv"
cost = 0.00005

[labels]
lambda = 0.002
horizon = 10
"#;

    #[test]
    fn approach_defaults_are_applied() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.sae.activation, Activation::Swish);
        assert_eq!(c.sae.noise_rate, 0.05);
        assert_eq!(c.sae.output_mode, OutputMode::Ternary);
        assert_eq!((c.sae.epochs, c.sae.learning_rate), (50, 0.01));
        assert_eq!(c.phi.delta, 20.0);
        assert_eq!(c.fracdiff.alpha, 0.01);

        let two = MINIMAL.replace("approach = 4", "approach = 2");
        let c = RunConfig::from_toml(&two).unwrap();
        assert_eq!((c.sae.activation, c.sae.noise_rate, c.sae.use_autoencoder), (Activation::Tanh, 0.0, false));
        assert_eq!(c.target(), Target::NextSign);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml(&MINIMAL.replace("approach = 4", "approach = 5")),
            Err(Error::Config(_))
        ));
        let noisy = format!("{}\n[sae]\nnoise_rate = 0.1\n", MINIMAL.replace("approach = 4", "approach = 2"));
        assert!(RunConfig::from_toml(&noisy).is_err());
        let typo = format!("{MINIMAL}\n[sae]\nepoch = 3\n");
        assert!(RunConfig::from_toml(&typo).is_err());
        let wrong_mode = format!("{MINIMAL}\n[sae]\noutput_mode = \"binary\"\n");
        assert!(RunConfig::from_toml(&wrong_mode).is_err());
    }

    #[test]
    fn config_round_trip_and_digest() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        assert_eq!(c.digest().unwrap().len(), 64);
        let other = RunConfig { seed: 4, ..c.clone() };
        assert_ne!(other.digest().unwrap(), c.digest().unwrap());
        assert!(c.header().unwrap().starts_with("# seed=3 config_digest="));
    }

    #[test]
    fn sweep_grid_expansion() {
        let text = format!("{MINIMAL}\n[sweep]\n\"labels.lambda\" = [0.001, 0.002, 0.003]\n\"labels.horizon\" = [5, 10, 20]\n");
        let user: toml::Table = text.parse().unwrap();
        let cells = sweep_cells(&user).unwrap();
        assert_eq!(cells.len(), 9);
        // keys expand in sorted order, the last one fastest
        assert_eq!(cells[1].config.labels.horizon, 5);
        assert_eq!(cells[1].config.labels.lambda, 0.002);
        assert_eq!(cells[3].config.labels.horizon, 10);
        assert_eq!(cells[3].config.labels.lambda, 0.001);
        assert_eq!(cells[5].config.seed, 3 ^ 5);
        assert!(cells.iter().all(|c| c.config.sweep.is_empty()));

        let bad = format!("{MINIMAL}\n[sweep]\n\"labels.lambdaa\" = [0.001]\n");
        assert!(sweep_cells(&bad.parse().unwrap()).is_err());
        let single = format!("{MINIMAL}\n[sweep]\n\"labels.lambda\" = [0.002]\n");
        let cells = sweep_cells(&single.parse().unwrap()).unwrap();
        let plain = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cells[0].config, plain);
    }

    #[test]
    fn periods_per_year_inference() {
        let daily: Vec<i64> = (0..366).map(|d| d * 86_400).collect();
        let p = infer_periods_per_year(&daily).unwrap();
        assert!((p - 365.25).abs() < 1e-9);
    }
}

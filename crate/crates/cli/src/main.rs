use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tblsae::fracdiff::{scan, FracDiffConfig};
use tblsae::ingest::{align_features, format_ts, load_bars, load_feature, resample, AlignPolicy};
use tblsae::labeling::{label_bars, LabelSpec};
use tblsae::runner::{load_config, report_from_files, run_approach, sweep, text_digest, RunConfig};

#[derive(Parser)]
#[command(name = "tblsae", version, about = "Triple-barrier labeling and supervised-autoencoder trading research")]
struct Cli {
    /// Worker threads for walk-forward splits and sweep cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate and align bars and features; write canonical CSVs.
    Ingest(IngestArgs),
    /// Triple-barrier labels for a bar file.
    Label(LabelArgs),
    /// ADF diagnostics of the FFD transform over the d grid, per series.
    FracdiffScan(ScanArgs),
    /// Run one approach end to end from a config file.
    Run(RunArgs),
    /// Run every cell of the config's [sweep] grid.
    Sweep(RunArgs),
    /// Metrics for equity curves on disk.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    ForwardFill,
    Drop,
}

impl From<Policy> for AlignPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::ForwardFill => AlignPolicy::ForwardFill,
            Policy::Drop => AlignPolicy::Drop,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// OHLCV bar CSV.
    #[arg(long)]
    bars: PathBuf,
    #[arg(long, default_value = "ASSET")]
    symbol: String,
    /// Resample to this many minutes.
    #[arg(long)]
    frequency: Option<u32>,
    /// Extra feature series as NAME=PATH; repeatable.
    #[arg(long = "feature", value_parser = parse_feature)]
    features: Vec<(String, PathBuf)>,
    #[arg(long, value_enum, default_value = "forward-fill")]
    policy: Policy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    bars: PathBuf,
    #[arg(long)]
    lambda: f64,
    /// Horizon in bars.
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    lower_lambda: Option<f64>,
    #[arg(long)]
    use_high_low: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScanArgs {
    /// Bar CSV; its close series is scanned.
    #[arg(long)]
    bars: PathBuf,
    #[arg(long = "feature", value_parser = parse_feature)]
    features: Vec<(String, PathBuf)>,
    /// Read the [fracdiff] table of a run config instead of the library defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_weights: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Equity CSVs (`timestamp,equity`); repeatable.
    #[arg(long, required = true)]
    equity: Vec<PathBuf>,
    /// Reference curve for the DM and IR tests.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    trades: Option<PathBuf>,
    #[arg(long)]
    periods_per_year: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.json and report.txt; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_feature(raw: &str) -> Result<(String, PathBuf), String> {
    match raw.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got `{raw}`")),
    }
}

/// Header for outputs that come from flags rather than a config file.
fn flag_header(seed: u64, description: &str) -> String {
    format!("# seed={seed} config_digest={}\n", text_digest(description))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let mut bars = load_bars(&a.bars, &a.symbol)?;
    if let Some(f) = a.frequency {
        bars = resample(&bars, f)?;
    }
    let raw = a
        .features
        .iter()
        .map(|(name, path)| load_feature(path, name))
        .collect::<tblsae::Result<Vec<_>>>()?;
    let frame = align_features(&bars, &raw, a.policy.into())?;
    let description = format!(
        "ingest bars={} symbol={} frequency={:?} features={:?} policy={:?}",
        a.bars.display(),
        a.symbol,
        a.frequency,
        a.features,
        AlignPolicy::from(a.policy)
    );
    let header = flag_header(a.seed, &description);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    bars.write_csv(&a.out.join("bars.csv"), &header)?;
    frame.write_csv(&a.out.join("features.csv"), &header)?;
    log::info!("{} bars, {} aligned feature rows", bars.len(), frame.len());
    Ok(())
}

fn label(a: &LabelArgs) -> Result<()> {
    let spec = LabelSpec {
        lambda: a.lambda,
        horizon: a.horizon,
        lower_lambda: a.lower_lambda,
        use_high_low: a.use_high_low,
    };
    spec.validate()?;
    let bars = load_bars(&a.bars, "ASSET")?;
    let labels = label_bars(&bars, &spec)?;
    let mut text = flag_header(a.seed, &format!("label bars={} spec={spec:?}", a.bars.display()));
    text.push_str("timestamp,label\n");
    for (t, l) in bars.timestamps.iter().zip(&labels.values) {
        let _ = writeln!(text, "{},{}", format_ts(*t), l);
    }
    write_text(&a.out, &text)
}

fn fracdiff_scan(a: &ScanArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let (table, _) = load_config(path)?;
            RunConfig::from_table(&table)?.fracdiff
        }
        None => FracDiffConfig::default(),
    };
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(m) = a.max_weights {
        cfg.max_weights = m;
    }
    if let Some(al) = a.alpha {
        cfg.alpha = al;
    }
    cfg.validate()?;
    let bars = load_bars(&a.bars, "ASSET")?;
    let mut series = vec![("close".to_string(), bars.close.clone())];
    for (name, path) in &a.features {
        let raw = load_feature(path, name)?;
        series.push((name.clone(), raw.observations.iter().map(|o| o.1).collect()));
    }
    let description = format!("fracdiff-scan bars={} features={:?} config={cfg:?}", a.bars.display(), a.features);
    let mut text = flag_header(a.seed, &description);
    text.push_str("feature,d,adf_stat,p_value,corr\n");
    for (name, values) in &series {
        let rows = scan(values, &cfg).with_context(|| format!("scanning {name}"))?;
        for r in rows {
            let _ = writeln!(text, "{name},{},{},{},{}", r.d, r.statistic, r.p_value, r.correlation);
        }
    }
    write_text(&a.out, &text)
}

fn load_run_table(a: &RunArgs) -> Result<(tblsae::runner::ConfigTable, PathBuf)> {
    let (mut table, base) = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        let seed = i64::try_from(seed).context("seed must fit in a signed 64-bit integer")?;
        table.insert("seed".into(), seed.into());
    }
    Ok((table, base))
}

fn run(a: &RunArgs) -> Result<()> {
    let (table, base) = load_run_table(a)?;
    let cfg = RunConfig::from_table(&table)?;
    let report = run_approach(&cfg, &base, &a.out)?;
    print!("{}", report.table());
    println!("outputs written to {}", a.out.display());
    Ok(())
}

fn run_sweep(a: &RunArgs) -> Result<()> {
    let (table, base) = load_run_table(a)?;
    let done = sweep(&table, &base, &a.out)?;
    println!("{} cells; heat-table at {}", done.len(), a.out.join("sweep.csv").display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let (reports, table) = report_from_files(&a.equity, a.baseline.as_deref(), a.trades.as_deref(), a.periods_per_year)?;
    let json = serde_json::to_string_pretty(&reports)?;
    println!("{json}");
    print!("{table}");
    if let Some(out) = &a.out {
        let description = format!(
            "report equity={:?} baseline={:?} trades={:?} ppy={:?}",
            a.equity, a.baseline, a.trades, a.periods_per_year
        );
        let header = flag_header(a.seed, &description);
        // JSON has no comments, so the header goes into a field
        let wrapped = serde_json::json!({
            "seed": a.seed,
            "config_digest": text_digest(&description),
            "reports": reports,
        });
        write_text(&out.join("report.json"), &serde_json::to_string_pretty(&wrapped)?)?;
        write_text(&out.join("report.txt"), &format!("{header}{table}"))?;
    }
    Ok(())
}

/// The error chain on one line. Library errors already embed their causes in
/// their message, so causes that repeat are skipped.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Label(a) => label(a),
        Command::FracdiffScan(a) => fracdiff_scan(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

//! Synthetic markets shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tblsae::ingest::{BarSeries, FeatureFrame};
use tblsae::labeling::{label_bars, LabelSpec};

/// 2020-01-01T00:00:00Z.
pub const START: i64 = 1_577_836_800;
/// Fifteen-minute bars in a 6.5-hour session.
pub const PERIODS_PER_YEAR: f64 = 252.0 * 26.0;

/// Prices whose next return leans on a persistent, observable signal:
/// `r[t+1] = strength * s[t] + noise * e`, with `s` a unit-variance AR(1).
pub struct SignalMarket {
    pub bars: BarSeries,
    pub signal: Vec<f64>,
}

pub fn signal_market(n: usize, seed: u64, strength: f64, noise: f64) -> SignalMarket {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let phi: f64 = 0.9;
    let innovation = (1.0 - phi * phi).sqrt();
    let mut signal = Vec::with_capacity(n);
    let mut s = unit.sample(&mut rng);
    for _ in 0..n {
        signal.push(s);
        s = phi * s + innovation * unit.sample(&mut rng);
    }
    let mut closes = Vec::with_capacity(n);
    let mut p = 100.0;
    for t in 0..n {
        if t > 0 {
            p *= 1.0 + strength * signal[t - 1] + noise * unit.sample(&mut rng);
        }
        closes.push(p);
    }
    SignalMarket {
        bars: BarSeries::from_closes("SYN", 15, START, &closes).unwrap(),
        signal,
    }
}

/// Close first, then the extra columns.
pub fn frame(bars: &BarSeries, extra: &[(&str, Vec<f64>)]) -> FeatureFrame {
    let mut names = vec!["close".to_string()];
    let mut cols = vec![bars.close.clone()];
    for (name, col) in extra {
        names.push((*name).to_string());
        cols.push(col.clone());
    }
    FeatureFrame::from_columns(names, bars.timestamps.clone(), &cols).unwrap()
}

/// The triple-barrier label of each bar as a feature. It peeks into the future,
/// which is the point: a model given it should trade almost perfectly.
pub fn leaked_labels(bars: &BarSeries, spec: &LabelSpec) -> Vec<f64> {
    let mut col: Vec<f64> = label_bars(bars, spec).unwrap().values.iter().map(|l| f64::from(*l)).collect();
    col.push(0.0);
    col
}

/// A minimal approach config; `extra` is appended verbatim.
pub fn config_text(approach: u8, seed: u64, extra: &str) -> String {
    format!(
        r#"
approach = {approach}
seed = {seed}

[[assets]]
symbol = "SYN"
bars = "bars.csv"

[labels]
lambda = 0.002
horizon = 10

[walkforward]
period_len = 250
max_train_periods = 3

[fracdiff]
tau = 1e-3
max_weights = 60

[metrics]
periods_per_year = {PERIODS_PER_YEAR}
{extra}
"#
    )
}

/// Writes the market as `bars.csv` and `signal.csv` (plus any extra feature files)
/// into `dir`, in the formats the loaders read.
pub fn write_market(dir: &std::path::Path, m: &SignalMarket, extra: &[(&str, &[f64])]) {
    m.bars.write_csv(&dir.join("bars.csv"), "").unwrap();
    let mut files: Vec<(&str, &[f64])> = vec![("signal", &m.signal)];
    files.extend_from_slice(extra);
    for (name, values) in files {
        let mut text = String::from("timestamp,value\n");
        for (t, v) in m.bars.timestamps.iter().zip(values) {
            text.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(dir.join(format!("{name}.csv")), text).unwrap();
    }
}

//! Position mapping and equity simulation with proportional transaction costs.
//!
//! All trades execute at the bar close. Costs are applied multiplicatively, one
//! `(1 - c)` factor per leg, so a flip from long to short pays twice.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_ts, parse_timestamp, write_file, BarSeries};
use crate::labeling::{check_alphabet, LabelSpec};
use crate::sae::Predictions;

pub type Position = i8;

pub const DEFAULT_CAPITAL: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fraction of equity paid per leg, e.g. 0.00005 for 0.005%.
    pub per_side: f64,
}

impl CostModel {
    pub fn new(per_side: f64) -> Result<Self> {
        let c = CostModel { per_side };
        c.validate()?;
        Ok(c)
    }

    pub fn zero() -> Self {
        CostModel { per_side: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.per_side) {
            return Err(Error::InvalidParameter(format!("per-side cost {} outside [0, 1)", self.per_side)));
        }
        Ok(())
    }

    fn factor(&self, legs: u32) -> f64 {
        (1.0 - self.per_side).powi(legs as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    RegressionSign,
    Binary,
    Ternary,
}

/// Maps model output to positions in {-1, 0, +1}. A regression prediction of exactly
/// zero keeps the previous position (flat at the first bar).
pub fn to_positions(predictions: &Predictions, mode: SignalMode) -> Result<Vec<Position>> {
    match (mode, predictions) {
        (SignalMode::RegressionSign, Predictions::Values(v)) => {
            let mut prev = 0;
            v.iter()
                .map(|&p| {
                    if !p.is_finite() {
                        return Err(Error::Validation(format!("non-finite prediction {p}")));
                    }
                    if p > 0.0 {
                        prev = 1;
                    } else if p < 0.0 {
                        prev = -1;
                    }
                    Ok(prev)
                })
                .collect()
        }
        (SignalMode::Binary, Predictions::Labels(l)) => {
            if let Some(bad) = l.iter().find(|x| **x != 1 && **x != -1) {
                return Err(Error::Validation(format!("binary prediction {bad} not in {{-1, +1}}")));
            }
            Ok(l.clone())
        }
        (SignalMode::Ternary, Predictions::Labels(l)) => {
            check_alphabet(l)?;
            Ok(l.clone())
        }
        _ => Err(Error::InvalidParameter(format!("predictions do not match signal mode {mode:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl EquityCurve {
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", timestamps.len()),
                actual: format!("{}", values.len()),
            });
        }
        if values.is_empty() {
            return Err(Error::Empty("equity curve".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("equity values must be positive and finite, found {v}")));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("equity timestamps must strictly increase".into()));
        }
        Ok(EquityCurve { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("non-empty curve")
    }

    pub fn returns(&self) -> Vec<f64> {
        crate::stats::simple_returns(&self.values)
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::from(header);
        out.push_str("timestamp,value\n");
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            let _ = writeln!(out, "{},{}", format_ts(*t), v);
        }
        out
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        write_file(path, self.to_csv(header).as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut ts = Vec::new();
        let mut vs = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            let parse_err = |m: String| Error::Parse {
                line: rec.position().map_or(i + 2, |p| p.line() as usize),
                message: m,
            };
            let t = rec.get(0).ok_or_else(|| parse_err("missing timestamp".into()))?;
            let v = rec.get(1).ok_or_else(|| parse_err("missing value".into()))?;
            ts.push(parse_timestamp(t).ok_or_else(|| parse_err(format!("bad timestamp `{t}`")))?);
            vs.push(v.parse::<f64>().map_err(|e| parse_err(format!("bad value `{v}`: {e}")))?);
        }
        EquityCurve::new(ts, vs)
    }
}

/// Marks the strategy to market bar by bar. The position held over `(t, t+1]` is
/// `positions[t]`; changing it at `t` costs one leg per unit of change. The final
/// position is never executed because there is no later bar to realize it.
pub fn simulate(
    positions: &[Position],
    closes: &[f64],
    timestamps: &[i64],
    costs: CostModel,
    initial: f64,
) -> Result<EquityCurve> {
    if positions.len() != closes.len() || timestamps.len() != closes.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positions and timestamps", closes.len()),
            actual: format!("{} positions, {} timestamps", positions.len(), timestamps.len()),
        });
    }
    if closes.is_empty() {
        return Err(Error::Empty("no bars to simulate".into()));
    }
    check_alphabet(positions)?;
    costs.validate()?;
    if !(initial > 0.0) {
        return Err(Error::InvalidParameter(format!("initial capital must be > 0, got {initial}")));
    }
    if closes.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::Validation("closes must be positive".into()));
    }
    let mut values = Vec::with_capacity(closes.len());
    values.push(initial);
    let mut prev: Position = 0;
    for t in 0..closes.len() - 1 {
        let legs = (positions[t] - prev).unsigned_abs() as u32;
        let r = closes[t + 1] / closes[t] - 1.0;
        let v = values[t] * costs.factor(legs) * (1.0 + f64::from(positions[t]) * r);
        values.push(v);
        prev = positions[t];
    }
    EquityCurve::new(timestamps.to_vec(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitReason {
    Tp,
    Sl,
    Timed,
}

impl ExitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::Tp => "tp",
            ExitReason::Sl => "sl",
            ExitReason::Timed => "timed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub entry_index: usize,
    pub exit_index: usize,
    pub entry_ts: i64,
    pub exit_ts: i64,
    pub direction: Position,
    pub exit_reason: ExitReason,
    pub gross_return: f64,
    pub net_return: f64,
    /// Opened on the same bar the previous trade closed.
    pub reentry: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TblBacktest {
    pub equity: EquityCurve,
    pub trades: Vec<Trade>,
}

/// Triple-barrier execution: a nonzero signal opens a trade at the close with
/// take-profit and stop-loss at the label barriers and a timed exit `horizon` bars
/// later (clipped to the last bar). Barrier exits fill exactly at the barrier.
/// Signals that arrive while a trade is open are dropped.
pub fn simulate_tbl(
    signals: &[Position],
    bars: &BarSeries,
    spec: &LabelSpec,
    costs: CostModel,
    initial: f64,
) -> Result<TblBacktest> {
    if signals.len() != bars.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} signals", bars.len()),
            actual: format!("{}", signals.len()),
        });
    }
    if bars.is_empty() {
        return Err(Error::Empty("no bars to simulate".into()));
    }
    check_alphabet(signals)?;
    spec.validate()?;
    costs.validate()?;
    if !(initial > 0.0) {
        return Err(Error::InvalidParameter(format!("initial capital must be > 0, got {initial}")));
    }
    let close = &bars.close;
    let last = close.len() - 1;
    let up = spec.lambda;
    let down = spec.lower_lambda.unwrap_or(spec.lambda);

    let mut values = vec![initial; close.len()];
    let mut trades: Vec<Trade> = Vec::new();
    let mut t = 0;
    let mut last_exit: Option<usize> = None;
    while t < last {
        let dir = signals[t];
        if dir == 0 {
            values[t + 1] = values[t];
            t += 1;
            continue;
        }
        let entry_value = values[t];
        let entry = close[t];
        let (upper, lower) = (entry * (1.0 + up), entry * (1.0 - down));
        let end = (t + spec.horizon).min(last);
        let mut exit = None;
        for i in t + 1..=end {
            let (hit_up, hit_down) = if spec.use_high_low {
                (bars.high[i] >= upper, bars.low[i] <= lower)
            } else {
                (close[i] >= upper, close[i] <= lower)
            };
            // both touched inside one bar: assume the adverse barrier came first
            let outcome = match (hit_up, hit_down, dir > 0) {
                (true, true, true) | (false, true, true) => Some((ExitReason::Sl, -down)),
                (true, true, false) | (true, false, false) => Some((ExitReason::Sl, -up)),
                (true, false, true) => Some((ExitReason::Tp, up)),
                (false, true, false) => Some((ExitReason::Tp, down)),
                (false, false, _) => None,
            };
            if let Some((reason, gross)) = outcome {
                exit = Some((i, reason, gross));
                break;
            }
            values[i] = entry_value * costs.factor(1) * (1.0 + f64::from(dir) * (close[i] / entry - 1.0));
        }
        let (exit_index, reason, gross) =
            exit.unwrap_or((end, ExitReason::Timed, f64::from(dir) * (close[end] / entry - 1.0)));
        let net = costs.factor(2) * (1.0 + gross) - 1.0;
        values[exit_index] = entry_value * (1.0 + net);
        trades.push(Trade {
            entry_index: t,
            exit_index,
            entry_ts: bars.timestamps[t],
            exit_ts: bars.timestamps[exit_index],
            direction: dir,
            exit_reason: reason,
            gross_return: gross,
            net_return: net,
            reentry: last_exit == Some(t),
        });
        last_exit = Some(exit_index);
        t = exit_index;
    }
    Ok(TblBacktest {
        equity: EquityCurve::new(bars.timestamps.clone(), values)?,
        trades,
    })
}

pub fn trades_to_csv(trades: &[Trade], header: &str) -> String {
    let mut out = String::from(header);
    out.push_str("entry_ts,exit_ts,direction,exit_reason,gross_return,net_return\n");
    for t in trades {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            format_ts(t.entry_ts),
            format_ts(t.exit_ts),
            t.direction,
            t.exit_reason.as_str(),
            t.gross_return,
            t.net_return
        );
    }
    out
}

pub fn write_trades_csv(trades: &[Trade], path: &Path, header: &str) -> Result<()> {
    write_file(path, trades_to_csv(trades, header).as_bytes())
}

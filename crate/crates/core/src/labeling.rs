//! Triple-barrier labels and the payoff metric built on them.
//!
//! A label at bar `t` says which barrier the path `close[t..=t+n]` touches first:
//! `+1` for the upper barrier `close[t] * (1 + lambda)`, `-1` for the lower barrier
//! `close[t] * (1 - lambda)`, `0` when the horizon runs out. The horizon is clipped
//! at the last bar and the final bar, having no future, gets no label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::BarSeries;

pub type Label = i8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    /// Barrier width as a fraction of the entry price.
    pub lambda: f64,
    /// Horizon in bars.
    pub horizon: usize,
    /// Width of the lower barrier when it differs from the upper one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_lambda: Option<f64>,
    /// Check barriers against bar highs and lows instead of closes.
    #[serde(default)]
    pub use_high_low: bool,
}

impl LabelSpec {
    pub fn new(lambda: f64, horizon: usize) -> Result<Self> {
        let spec = LabelSpec {
            lambda,
            horizon,
            lower_lambda: None,
            use_high_low: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidParameter(format!("barrier width must be in (0, 1), got {}", self.lambda)));
        }
        if let Some(lo) = self.lower_lambda {
            if !(lo > 0.0 && lo < 1.0) {
                return Err(Error::InvalidParameter(format!("lower barrier width must be in (0, 1), got {lo}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least one bar".into()));
        }
        Ok(())
    }

    pub fn upper(&self, entry: f64) -> f64 {
        entry * (1.0 + self.lambda)
    }

    pub fn lower(&self, entry: f64) -> f64 {
        entry * (1.0 - self.lower_lambda.unwrap_or(self.lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSeries {
    /// One label per bar, except the last.
    pub values: Vec<Label>,
    pub spec: LabelSpec,
    pub source_len: usize,
}

fn check_prices(prices: &[f64]) -> Result<()> {
    if prices.len() < 2 {
        return Err(Error::SeriesTooShort {
            required: 2,
            actual: prices.len(),
        });
    }
    if let Some(i) = prices.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidParameter(format!("price at index {i} is not positive: {}", prices[i])));
    }
    Ok(())
}

/// Labels from a close path; the scan starts at `t` itself and the upper barrier is
/// checked first on every bar.
pub fn triple_barrier_labels(prices: &[f64], spec: &LabelSpec) -> Result<LabelSeries> {
    spec.validate()?;
    check_prices(prices)?;
    let last = prices.len() - 1;
    let values = (0..last)
        .map(|t| {
            let (up, down) = (spec.upper(prices[t]), spec.lower(prices[t]));
            let end = (t + spec.horizon).min(last);
            prices[t..=end]
                .iter()
                .find_map(|&p| {
                    if p >= up {
                        Some(1)
                    } else if p <= down {
                        Some(-1)
                    } else {
                        None
                    }
                })
                .unwrap_or(0)
        })
        .collect();
    Ok(LabelSeries {
        values,
        spec: *spec,
        source_len: prices.len(),
    })
}

/// Labels against intrabar extremes. Entry is the close of bar `t`, so the scan starts
/// at `t + 1`; when one bar touches both barriers the upper one wins.
pub fn triple_barrier_labels_high_low(bars: &BarSeries, spec: &LabelSpec) -> Result<LabelSeries> {
    spec.validate()?;
    check_prices(&bars.close)?;
    let last = bars.len() - 1;
    let values = (0..last)
        .map(|t| {
            let entry = bars.close[t];
            let (up, down) = (spec.upper(entry), spec.lower(entry));
            let end = (t + spec.horizon).min(last);
            (t + 1..=end)
                .find_map(|i| {
                    if bars.high[i] >= up {
                        Some(1)
                    } else if bars.low[i] <= down {
                        Some(-1)
                    } else {
                        None
                    }
                })
                .unwrap_or(0)
        })
        .collect();
    Ok(LabelSeries {
        values,
        spec: *spec,
        source_len: bars.len(),
    })
}

/// Dispatches on `spec.use_high_low`.
pub fn label_bars(bars: &BarSeries, spec: &LabelSpec) -> Result<LabelSeries> {
    if spec.use_high_low {
        triple_barrier_labels_high_low(bars, spec)
    } else {
        triple_barrier_labels(&bars.close, spec)
    }
}

pub fn check_alphabet(labels: &[Label]) -> Result<()> {
    match labels.iter().position(|l| !(-1..=1).contains(l)) {
        Some(i) => Err(Error::InvalidParameter(format!(
            "label {} at index {i} is outside {{-1, 0, 1}}",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Directly-correct, directly-incorrect and timed-exit counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TradeOutcomeCounts {
    pub dcc: u64,
    pub dic: u64,
    pub tec: u64,
}

impl TradeOutcomeCounts {
    pub fn trades(&self) -> u64 {
        self.dcc + self.dic + self.tec
    }
}

pub fn payoff_counts(predicted: &[Label], actual: &[Label]) -> Result<TradeOutcomeCounts> {
    if predicted.len() != actual.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", predicted.len()),
            actual: format!("{} labels", actual.len()),
        });
    }
    check_alphabet(predicted)?;
    check_alphabet(actual)?;
    let mut counts = TradeOutcomeCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (0, _) => {}
            (_, 0) => counts.tec += 1,
            _ if p == a => counts.dcc += 1,
            _ => counts.dic += 1,
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiParams {
    pub lambda: f64,
    /// Number of timed exits weighed as one wrong-direction trade; must exceed lambda.
    pub delta: f64,
}

impl PhiParams {
    pub fn new(lambda: f64, delta: f64) -> Result<Self> {
        let p = PhiParams { lambda, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidParameter(format!("lambda must be in (0, 1), got {}", self.lambda)));
        }
        if !(self.delta > self.lambda) {
            return Err(Error::InvalidParameter(format!(
                "delta ({}) must be strictly greater than lambda ({})",
                self.delta, self.lambda
            )));
        }
        Ok(())
    }
}

fn pow_count(base: f64, count: u64) -> f64 {
    match i32::try_from(count) {
        Ok(c) => base.powi(c),
        Err(_) => base.powf(count as f64),
    }
}

/// `(1 + lambda)^DCC * (1 - lambda)^DIC`, times `(1 - lambda / delta)^TEC` when
/// `include_tec` is set.
pub fn phi(counts: &TradeOutcomeCounts, params: &PhiParams, include_tec: bool) -> Result<f64> {
    params.validate()?;
    let lambda = params.lambda;
    let mut value = pow_count(1.0 + lambda, counts.dcc) * pow_count(1.0 - lambda, counts.dic);
    if include_tec {
        value *= pow_count(1.0 - lambda / params.delta, counts.tec);
    }
    Ok(value)
}

/// Return on one trade given the predicted and realized label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayoffCell {
    Exact(f64),
    /// Somewhere strictly inside `(lo, hi)`; the horizon expired first.
    Open(f64, f64),
}

pub fn payoff_table_cell(pred: Label, actual: Label, lambda: f64) -> Result<PayoffCell> {
    check_alphabet(&[pred, actual])?;
    Ok(match (pred, actual) {
        (0, _) => PayoffCell::Exact(0.0),
        (_, 0) => PayoffCell::Open(-lambda, lambda),
        _ if pred == actual => PayoffCell::Exact(lambda),
        _ => PayoffCell::Exact(-lambda),
    })
}

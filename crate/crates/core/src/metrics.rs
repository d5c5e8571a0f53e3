//! Performance metrics for equity curves and two strategy-comparison tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backtest::EquityCurve;
use crate::error::{Error, Result};
use crate::stats::{mean, normal_cdf, sample_std};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Return periods per year used for annualization.
    pub periods_per_year: f64,
}

impl MetricConfig {
    pub fn new(periods_per_year: f64) -> Result<Self> {
        if !(periods_per_year > 0.0) || !periods_per_year.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "periods per year must be > 0, got {periods_per_year}"
            )));
        }
        Ok(MetricConfig { periods_per_year })
    }

    /// Years spanned by `len` equity points.
    pub fn years(&self, len: usize) -> f64 {
        len.saturating_sub(1) as f64 / self.periods_per_year
    }
}

fn check_positive(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Empty("equity values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Validation(format!("equity values must be positive, found {v}")));
    }
    Ok(())
}

/// Annualized return compounded: `(V_n / V_0)^(1 / years) - 1`.
pub fn arc(values: &[f64], years: f64) -> Result<f64> {
    check_positive(values)?;
    if !(years > 0.0) {
        return Err(Error::InvalidParameter(format!("years must be > 0, got {years}")));
    }
    Ok((values[values.len() - 1] / values[0]).powf(1.0 / years) - 1.0)
}

/// Annualized standard deviation: sample std of returns times `sqrt(n_year)`.
pub fn asd(returns: &[f64], periods_per_year: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::SeriesTooShort {
            required: 2,
            actual: returns.len(),
        });
    }
    Ok(sample_std(returns) * periods_per_year.sqrt())
}

pub fn information_ratio(arc: f64, asd: f64) -> Result<f64> {
    if !(asd > 0.0) {
        return Err(Error::UndefinedMetric("information ratio needs ASD > 0".into()));
    }
    Ok(arc / asd)
}

/// Maximum drawdown as a fraction of the running peak.
pub fn mdd(values: &[f64]) -> Result<f64> {
    check_positive(values)?;
    let mut peak = values[0];
    let mut worst = 0.0f64;
    for &v in values {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDuration {
    pub years: f64,
    pub periods: usize,
    /// The longest spell had not recovered by the final bar.
    pub unrecovered: bool,
}

/// Maximum loss duration: the longest span from a bar to the first later bar that
/// strictly exceeds it. A new high on the very next bar is no loss at all. A spell
/// still open at the end of the series runs to the final bar.
pub fn mld(values: &[f64], periods_per_year: f64) -> Result<LossDuration> {
    check_positive(values)?;
    if !(periods_per_year > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "periods per year must be > 0, got {periods_per_year}"
        )));
    }
    let last = values.len() - 1;
    let mut best = (0usize, false);
    let mut i = 0;
    // only running maxima can start the longest spell
    while i < last {
        let peak = values[i];
        match (i + 1..=last).find(|&j| values[j] > peak) {
            Some(j) => {
                if j > i + 1 && j - i > best.0 {
                    best = (j - i, false);
                }
                i = j;
            }
            None => {
                if last - i > best.0 {
                    best = (last - i, true);
                }
                break;
            }
        }
    }
    Ok(LossDuration {
        years: best.0 as f64 / periods_per_year,
        periods: best.0,
        unrecovered: best.1,
    })
}

/// Drawdown-adjusted information ratio `ARC^2 * sign(ARC) / (ASD * MDD)`.
pub fn ir_star2(arc: f64, asd: f64, mdd: f64) -> Result<f64> {
    if !(asd > 0.0) {
        return Err(Error::UndefinedMetric("IR** needs ASD > 0".into()));
    }
    if !(mdd > 0.0) {
        return Err(Error::UndefinedMetric("IR** needs MDD > 0; report IR instead".into()));
    }
    if arc == 0.0 {
        return Ok(0.0);
    }
    Ok(arc * arc * arc.signum() / (asd * mdd))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn normal_p(statistic: f64, one_sided_lower: Option<bool>) -> f64 {
    match one_sided_lower {
        None => (2.0 * (1.0 - normal_cdf(statistic.abs()))).min(1.0),
        Some(true) => normal_cdf(statistic),
        Some(false) => 1.0 - normal_cdf(statistic),
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    if a.len() < 10 {
        return Err(Error::SeriesTooShort {
            required: 10,
            actual: a.len(),
        });
    }
    Ok(())
}

/// Diebold-Mariano test on loss differentials `d = A - B` with a normal reference.
/// The one-sided p-value is for the alternative "A has lower loss than B".
pub fn dm_test(losses_a: &[f64], losses_b: &[f64], one_sided: bool) -> Result<TestResult> {
    check_pair(losses_a, losses_b)?;
    let d: Vec<f64> = losses_a.iter().zip(losses_b).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let sd = sample_std(&d);
    if sd == 0.0 {
        if m == 0.0 {
            return Ok(TestResult {
                statistic: 0.0,
                p_value: if one_sided { 0.5 } else { 1.0 },
            });
        }
        return Err(Error::Degenerate("loss differential has zero variance".into()));
    }
    let statistic = m / (sd / (d.len() as f64).sqrt());
    Ok(TestResult {
        statistic,
        p_value: normal_p(statistic, one_sided.then_some(true)),
    })
}

/// Loss functions for the DM test.
pub fn squared_error(pred: &[f64], actual: &[f64]) -> Vec<f64> {
    pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).collect()
}

/// 1 when a position lost money over its bar, 0 otherwise.
pub fn direction_loss(positions: &[i8], returns: &[f64]) -> Vec<f64> {
    positions
        .iter()
        .zip(returns)
        .map(|(p, r)| if f64::from(*p) * r < 0.0 { 1.0 } else { 0.0 })
        .collect()
}

fn ir_of_returns(returns: &[f64], periods_per_year: f64) -> Result<f64> {
    let mut v = Vec::with_capacity(returns.len() + 1);
    v.push(1.0);
    for r in returns {
        v.push(v[v.len() - 1] * (1.0 + r));
    }
    let a = arc(&v, returns.len() as f64 / periods_per_year)?;
    information_ratio(a, asd(returns, periods_per_year)?)
}

/// Compares information ratios: `t = (IR_A - IR_B) / (sd(A - B) / sqrt(n))`. The
/// one-sided p-value is for the alternative "A has the higher IR".
pub fn ir_ttest(returns_a: &[f64], returns_b: &[f64], periods_per_year: f64, one_sided: bool) -> Result<TestResult> {
    check_pair(returns_a, returns_b)?;
    let diff: Vec<f64> = returns_a.iter().zip(returns_b).map(|(a, b)| a - b).collect();
    let sd = sample_std(&diff);
    if sd == 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: if one_sided { 0.5 } else { 1.0 },
        });
    }
    if !sd.is_finite() {
        return Err(Error::Degenerate("return differential is not finite".into()));
    }
    let ia = ir_of_returns(returns_a, periods_per_year)?;
    let ib = ir_of_returns(returns_b, periods_per_year)?;
    let statistic = (ia - ib) / (sd / (diff.len() as f64).sqrt());
    Ok(TestResult {
        statistic,
        p_value: normal_p(statistic, one_sided.then_some(false)),
    })
}

/// Equal-weight portfolio rebalanced every bar over the timestamps all curves share.
pub fn portfolio_equal_weight(curves: &[EquityCurve], initial: f64) -> Result<EquityCurve> {
    let first = curves.first().ok_or_else(|| Error::Empty("no curves to combine".into()))?;
    let mut common: Vec<i64> = first.timestamps.clone();
    for c in &curves[1..] {
        let mut keep = Vec::with_capacity(common.len());
        let mut j = 0;
        for &t in &common {
            while j < c.timestamps.len() && c.timestamps[j] < t {
                j += 1;
            }
            if j < c.timestamps.len() && c.timestamps[j] == t {
                keep.push(t);
            }
        }
        common = keep;
    }
    if common.is_empty() {
        return Err(Error::Empty("curves share no timestamps".into()));
    }
    let aligned: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| {
            let mut j = 0;
            common
                .iter()
                .map(|&t| {
                    while c.timestamps[j] != t {
                        j += 1;
                    }
                    c.values[j]
                })
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(common.len());
    values.push(initial);
    for k in 1..common.len() {
        let r = aligned.iter().map(|v| v[k] / v[k - 1] - 1.0).sum::<f64>() / aligned.len() as f64;
        values.push(values[k - 1] * (1.0 + r));
    }
    EquityCurve::new(common, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub name: String,
    pub initial_value: f64,
    pub final_value: f64,
    pub cumulative_return: f64,
    pub arc: f64,
    pub asd: f64,
    pub ir: Option<f64>,
    pub mdd: f64,
    pub mld_years: f64,
    pub mld_periods: usize,
    pub mld_unrecovered: bool,
    pub ir_star2: Option<f64>,
    pub n_trades: Option<usize>,
    pub dm: Option<TestResult>,
    pub ir_test: Option<TestResult>,
}

impl PerfReport {
    pub fn from_curve(name: &str, curve: &EquityCurve, cfg: MetricConfig) -> Result<Self> {
        let v = &curve.values;
        if v.len() < 3 {
            return Err(Error::SeriesTooShort {
                required: 3,
                actual: v.len(),
            });
        }
        let a = arc(v, cfg.years(v.len()))?;
        let s = asd(&curve.returns(), cfg.periods_per_year)?;
        let m = mdd(v)?;
        let l = mld(v, cfg.periods_per_year)?;
        Ok(PerfReport {
            name: name.to_string(),
            initial_value: v[0],
            final_value: v[v.len() - 1],
            cumulative_return: v[v.len() - 1] / v[0] - 1.0,
            arc: a,
            asd: s,
            ir: information_ratio(a, s).ok(),
            mdd: m,
            mld_years: l.years,
            mld_periods: l.periods,
            mld_unrecovered: l.unrecovered,
            ir_star2: ir_star2(a, s, m).ok(),
            n_trades: None,
            dm: None,
            ir_test: None,
        })
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn opt(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |v| format!("{v:.2}"))
}

type Cell = Box<dyn Fn(&PerfReport) -> String>;

/// Plain-text table with one column per report.
pub fn render_table(reports: &[PerfReport]) -> String {
    let rows: Vec<(&str, Cell)> = vec![
        ("V(t0)", Box::new(|r| format!("{:.2}", r.initial_value))),
        ("V(tn)", Box::new(|r| format!("{:.2}", r.final_value))),
        ("ARC", Box::new(|r| pct(r.arc))),
        ("ASD", Box::new(|r| pct(r.asd))),
        ("MDD", Box::new(|r| pct(r.mdd))),
        (
            "MLD",
            Box::new(|r| format!("{:.2}y{}", r.mld_years, if r.mld_unrecovered { "*" } else { "" })),
        ),
        ("IR", Box::new(|r| opt(r.ir))),
        ("IR**", Box::new(|r| opt(r.ir_star2))),
        ("Trades", Box::new(|r| r.n_trades.map_or("n/a".into(), |n| n.to_string()))),
        (
            "DM stat",
            Box::new(|r| r.dm.map_or("n/a".into(), |t| format!("{:.3} (p={:.3})", t.statistic, t.p_value))),
        ),
        (
            "IR t-stat",
            Box::new(|r| r.ir_test.map_or("n/a".into(), |t| format!("{:.3} (p={:.3})", t.statistic, t.p_value))),
        ),
    ];
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(18);
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "");
    for r in reports {
        let _ = write!(out, " {:>width$}", r.name);
    }
    out.push('\n');
    for (label, f) in &rows {
        let _ = write!(out, "{label:<10}");
        for r in reports {
            let _ = write!(out, " {:>width$}", f(r));
        }
        out.push('\n');
    }
    out
}

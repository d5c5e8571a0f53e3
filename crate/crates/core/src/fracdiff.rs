//! Fractional differencing with fixed-width windows, the Augmented Dickey-Fuller
//! test, and the search for the smallest stationarizing order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normal_cdf, pearson};

pub const DEFAULT_TAU: f64 = 1e-5;
pub const DEFAULT_MAX_WEIGHTS: usize = 10_000;

/// Binomial weights of `(1 - B)^d`, truncated at the first `|w_k| < tau` or after
/// `k_max` weights.
pub fn fd_weights(d: f64, tau: f64, k_max: usize) -> Result<Vec<f64>> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::InvalidParameter(format!("differencing order must be >= 0, got {d}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation tolerance must be > 0, got {tau}")));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("k_max must be >= 1".into()));
    }
    let mut w = vec![1.0];
    for k in 1..k_max {
        let next = -w[k - 1] * (d - k as f64 + 1.0) / k as f64;
        if next.abs() < tau {
            break;
        }
        w.push(next);
    }
    Ok(w)
}

/// Convolves `series` with `weights` (`weights[0]` applies to the current value).
///
/// Output has `series.len() - weights.len() + 1` values; the first corresponds to
/// input index `weights.len() - 1`.
pub fn ffd_apply(series: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidParameter("empty weight vector".into()));
    }
    let width = weights.len();
    if series.len() < width {
        return Err(Error::SeriesTooShort {
            required: width,
            actual: series.len(),
        });
    }
    Ok((width - 1..series.len())
        .map(|t| weights.iter().enumerate().map(|(k, w)| w * series[t - k]).sum())
        .collect())
}

/// Fixed-width-window fractional differencing, weights capped at [`DEFAULT_MAX_WEIGHTS`].
pub fn ffd_transform(series: &[f64], d: f64, tau: f64) -> Result<Vec<f64>> {
    let w = fd_weights(d, tau, DEFAULT_MAX_WEIGHTS)?;
    if series.len() <= w.len() && w.len() > 1 {
        return Err(Error::SeriesTooShort {
            required: w.len() + 1,
            actual: series.len(),
        });
    }
    ffd_apply(series, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LagPolicy {
    Fixed,
    /// Choose the lag count in `0..=max_lags` minimising AIC on a common sample.
    Aic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdfResult {
    pub statistic: f64,
    pub p_value: f64,
    pub lags: usize,
    pub nobs: usize,
    /// Finite-sample critical values at 1%, 5% and 10%.
    pub critical_values: [f64; 3],
}

// MacKinnon (1994) approximate asymptotic p-value surface, constant-only, one variable.
const TAU_MAX: f64 = 2.74;
const TAU_MIN: f64 = -18.83;
const TAU_STAR: f64 = -1.61;
const TAU_SMALLP: [f64; 3] = [2.1659, 1.4412, 3.8269e-2];
const TAU_LARGEP: [f64; 4] = [1.7339, 9.3202e-1, -1.2745e-1, -1.0368e-2];

// MacKinnon (2010) finite-sample critical-value response surface in 1/T, constant-only.
const CRIT_SURFACE: [[f64; 4]; 3] = [
    [-3.43035, -6.5393, -16.786, -79.433],
    [-2.86154, -2.8903, -4.234, -40.040],
    [-2.56677, -1.5384, -2.809, 0.0],
];

/// P-value of a constant-only Dickey-Fuller t statistic.
pub fn adf_p_value(statistic: f64) -> f64 {
    if statistic.is_nan() {
        return f64::NAN;
    }
    if statistic > TAU_MAX {
        return 1.0;
    }
    if statistic < TAU_MIN {
        return 0.0;
    }
    let coeffs: &[f64] = if statistic <= TAU_STAR { &TAU_SMALLP } else { &TAU_LARGEP };
    let z = coeffs.iter().rev().fold(0.0, |acc, c| acc * statistic + c);
    normal_cdf(z)
}

/// Critical values at 1%, 5%, 10% for a regression with `nobs` observations.
pub fn adf_critical_values(nobs: usize) -> [f64; 3] {
    let inv = 1.0 / nobs as f64;
    CRIT_SURFACE.map(|b| b[0] + b[1] * inv + b[2] * inv * inv + b[3] * inv * inv * inv)
}

struct OlsFit {
    statistic: f64,
    rss: f64,
    nobs: usize,
    params: usize,
}

/// Regress dx_t on [1, x_{t-1}, dx_{t-1}, ..., dx_{t-lags}] for t in `first..len`.
fn fit_adf(series: &[f64], lags: usize, first: usize) -> Result<OlsFit> {
    let n = series.len() - first;
    let k = 2 + lags;
    if n <= k {
        return Err(Error::SeriesTooShort {
            required: first + k + 1,
            actual: series.len(),
        });
    }
    let dx = |t: usize| series[t] - series[t - 1];
    let x = DMatrix::from_fn(n, k, |r, c| {
        let t = first + r;
        match c {
            0 => 1.0,
            1 => series[t - 1],
            _ => dx(t - (c - 1)),
        }
    });
    let y = DVector::from_fn(n, |r, _| dx(first + r));
    let xtx = x.transpose() * &x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ADF regression design is singular (constant or collinear series)".into()))?;
    let beta = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / (n - k) as f64;
    let cov11 = chol.inverse()[(1, 1)];
    let se = (sigma2 * cov11).sqrt();
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::Degenerate("ADF regression has zero residual variance".into()));
    }
    Ok(OlsFit {
        statistic: beta[1] / se,
        rss,
        nobs: n,
        params: k,
    })
}

/// Augmented Dickey-Fuller test with a constant and no trend.
pub fn adf_test(series: &[f64], max_lags: usize, policy: LagPolicy) -> Result<AdfResult> {
    if series.len() < max_lags + 10 {
        return Err(Error::SeriesTooShort {
            required: max_lags + 10,
            actual: series.len(),
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("series contains non-finite values".into()));
    }
    let first = series[0];
    if series.iter().all(|&v| v == first) {
        return Err(Error::Degenerate("series is constant".into()));
    }

    let lags = match policy {
        LagPolicy::Fixed => max_lags,
        LagPolicy::Aic => {
            let start = max_lags + 1;
            let mut best = (f64::INFINITY, 0usize);
            for p in 0..=max_lags {
                let fit = fit_adf(series, p, start)?;
                let n = fit.nobs as f64;
                let aic = n * (fit.rss / n).ln() + 2.0 * fit.params as f64;
                if aic < best.0 {
                    best = (aic, p);
                }
            }
            best.1
        }
    };
    let fit = fit_adf(series, lags, lags + 1)?;
    Ok(AdfResult {
        statistic: fit.statistic,
        p_value: adf_p_value(fit.statistic),
        lags,
        nobs: fit.nobs,
        critical_values: adf_critical_values(fit.nobs),
    })
}

/// One row of the stationarity scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub d: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// Correlation between the original and differenced series over their overlap.
    pub correlation: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FracDiffConfig {
    pub grid: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub max_weights: usize,
    pub adf_lags: usize,
    pub lag_policy: LagPolicy,
}

impl Default for FracDiffConfig {
    fn default() -> Self {
        FracDiffConfig {
            grid: default_grid(),
            alpha: 0.01,
            tau: DEFAULT_TAU,
            max_weights: DEFAULT_MAX_WEIGHTS,
            adf_lags: 1,
            lag_policy: LagPolicy::Fixed,
        }
    }
}

impl FracDiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidParameter("d grid is empty".into()));
        }
        if self.grid.iter().any(|d| !(*d >= 0.0)) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("d grid must be non-negative and strictly ascending".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("significance level {} outside (0, 1)", self.alpha)));
        }
        if !(self.tau > 0.0) || self.max_weights == 0 {
            return Err(Error::InvalidParameter("tau must be > 0 and max_weights >= 1".into()));
        }
        Ok(())
    }

    /// Longest weight window over the grid.
    pub fn max_window(&self) -> Result<usize> {
        let mut widest = 1;
        for &d in &self.grid {
            widest = widest.max(fd_weights(d, self.tau, self.max_weights)?.len());
        }
        Ok(widest)
    }
}

/// 0.00, 0.05, ..., 1.00.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) * 5.0 / 100.0).collect()
}

/// Evaluates every order in the grid: FFD transform, ADF, and memory correlation,
/// all over the same trailing rows.
pub fn scan(series: &[f64], config: &FracDiffConfig) -> Result<Vec<DiagnosticRow>> {
    config.validate()?;
    let widest = config.max_window()?;
    let required = widest - 1 + config.adf_lags + 10;
    if series.len() < required {
        return Err(Error::SeriesTooShort {
            required,
            actual: series.len(),
        });
    }
    config
        .grid
        .iter()
        .map(|&d| {
            let weights = fd_weights(d, config.tau, config.max_weights)?;
            let transformed = ffd_apply(series, &weights)?;
            // every order is scored on the rows the widest window leaves, so the
            // diagnostics compare like with like
            let common = &transformed[widest - weights.len()..];
            let adf = adf_test(common, config.adf_lags, config.lag_policy)?;
            let overlap = &series[widest - 1..];
            Ok(DiagnosticRow {
                d,
                statistic: adf.statistic,
                p_value: adf.p_value,
                correlation: pearson(overlap, common),
                window: weights.len(),
            })
        })
        .collect()
}

/// Smallest grid order whose FFD series rejects a unit root at `config.alpha`.
pub fn optimal_d(series: &[f64], config: &FracDiffConfig) -> Result<(f64, Vec<DiagnosticRow>)> {
    let diagnostics = scan(series, config)?;
    match diagnostics.iter().find(|r| r.p_value < config.alpha) {
        Some(row) => Ok((row.d, diagnostics)),
        None => Err(Error::NoStationaryOrder { diagnostics }),
    }
}

/// Fitted differencing order for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedOrder {
    pub name: String,
    pub d: f64,
    pub weights: Vec<f64>,
}

/// Per-feature orders and their realized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FracDiffSpec {
    pub orders: Vec<FittedOrder>,
    pub tau: f64,
    pub alpha: f64,
}

impl FracDiffSpec {
    pub fn window(&self) -> usize {
        self.orders.iter().map(|o| o.weights.len()).max().unwrap_or(1)
    }
}

//! Walk-forward validation: expanding-then-shifting train windows, each refit from
//! scratch on its own slice before predicting the next period.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracdiff::{ffd_apply, optimal_d, FittedOrder, FracDiffConfig, fd_weights};
use crate::ingest::{BarSeries, FeatureFrame};
use crate::labeling::{label_bars, payoff_counts, phi, Label, LabelSpec, PhiParams};
use crate::sae::{train, OutputMode, Predictions, SaeConfig, SaeModel, Targets, TrainingLog};
use crate::stats::{mean, population_std};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkForwardPlan {
    pub splits: Vec<Split>,
    pub period_len: usize,
    pub max_train_periods: Option<usize>,
}

/// Split `k` tests on period `initial + k` and trains on the `min(initial + k, max)`
/// periods just before it. A trailing partial period is dropped.
pub fn make_splits(
    total_bars: usize,
    period_len: usize,
    max_train_periods: Option<usize>,
    initial_train_periods: usize,
) -> Result<WalkForwardPlan> {
    if period_len == 0 || initial_train_periods == 0 || max_train_periods == Some(0) {
        return Err(Error::InvalidParameter(
            "period length, initial and max train periods must be >= 1".into(),
        ));
    }
    if let Some(max) = max_train_periods {
        if max < initial_train_periods {
            return Err(Error::InvalidParameter(format!(
                "max train periods {max} is below the initial {initial_train_periods}"
            )));
        }
    }
    let required = (initial_train_periods + 1) * period_len;
    if total_bars < required {
        return Err(Error::SeriesTooShort {
            required,
            actual: total_bars,
        });
    }
    let periods = total_bars / period_len;
    let splits = (initial_train_periods..periods)
        .enumerate()
        .map(|(k, p)| {
            let span = max_train_periods.map_or(p, |m| p.min(m));
            Split {
                index: k,
                train: (p - span) * period_len..p * period_len,
                test: p * period_len..(p + 1) * period_len,
            }
        })
        .collect();
    Ok(WalkForwardPlan {
        splits,
        period_len,
        max_train_periods,
    })
}

/// What the model learns to predict at each bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    /// Next-bar simple return, regression.
    NextReturn,
    /// Direction of the next bar: +1 when the close rises, -1 otherwise.
    NextSign,
    /// Triple-barrier label, three classes; `delta` scales the timed-exit penalty in
    /// the train payoff.
    Tbl { spec: LabelSpec, delta: f64 },
}

impl Target {
    pub fn output_mode(&self) -> OutputMode {
        match self {
            Target::NextReturn => OutputMode::Regression,
            Target::NextSign => OutputMode::Binary,
            Target::Tbl { .. } => OutputMode::Ternary,
        }
    }

    /// Bars of future prices each target looks at.
    pub fn lookahead(&self) -> usize {
        match self {
            Target::Tbl { spec, .. } => spec.horizon,
            _ => 1,
        }
    }

    /// One target per bar except the last.
    fn compute(&self, bars: &BarSeries) -> Result<TargetValues> {
        let c = &bars.close;
        Ok(match self {
            Target::NextReturn => TargetValues::Values(c.windows(2).map(|w| w[1] / w[0] - 1.0).collect()),
            Target::NextSign => TargetValues::Labels(c.windows(2).map(|w| if w[1] > w[0] { 1 } else { -1 }).collect()),
            Target::Tbl { spec, .. } => TargetValues::Labels(label_bars(bars, spec)?.values),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TargetValues {
    Values(Vec<f64>),
    Labels(Vec<Label>),
}

impl TargetValues {
    fn slice(&self, rows: Range<usize>) -> Targets {
        match self {
            TargetValues::Values(v) => Targets::Values(v[rows].to_vec()),
            TargetValues::Labels(l) => Targets::Labels(l[rows].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    #[default]
    Grid,
    Random,
}

/// Hyperparameter search on a validation tail of each train slice. Empty lists keep
/// the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub enabled: bool,
    pub strategy: SearchStrategy,
    /// Candidates evaluated by random search.
    pub trials: usize,
    pub validation_fraction: f64,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub noise_rate: Vec<f64>,
    pub bottleneck_fraction: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            enabled: false,
            strategy: SearchStrategy::Grid,
            trials: 15,
            validation_fraction: 0.2,
            learning_rate: vec![],
            batch_size: vec![],
            noise_rate: vec![],
            bottleneck_fraction: vec![],
            epochs: vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub noise_rate: f64,
    pub bottleneck_fraction: f64,
    pub epochs: usize,
}

impl Candidate {
    fn from_config(c: &SaeConfig) -> Self {
        Candidate {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            noise_rate: c.noise_rate,
            bottleneck_fraction: c.bottleneck_fraction,
            epochs: c.epochs,
        }
    }

    fn apply(&self, base: &SaeConfig) -> SaeConfig {
        SaeConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            noise_rate: self.noise_rate,
            bottleneck_fraction: self.bottleneck_fraction,
            epochs: self.epochs,
            ..base.clone()
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.strategy == SearchStrategy::Random && self.trials == 0 {
            return Err(Error::InvalidParameter("random search needs at least one trial".into()));
        }
        Ok(())
    }

    fn candidates(&self, base: &SaeConfig, seed: u64) -> Vec<Candidate> {
        let b = Candidate::from_config(base);
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let or_u = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let mut all = Vec::new();
        for &learning_rate in &or(&self.learning_rate, b.learning_rate) {
            for &batch_size in &or_u(&self.batch_size, b.batch_size) {
                for &noise_rate in &or(&self.noise_rate, b.noise_rate) {
                    for &bottleneck_fraction in &or(&self.bottleneck_fraction, b.bottleneck_fraction) {
                        for &epochs in &or_u(&self.epochs, b.epochs) {
                            all.push(Candidate {
                                learning_rate,
                                batch_size,
                                noise_rate,
                                bottleneck_fraction,
                                epochs,
                            });
                        }
                    }
                }
            }
        }
        if self.strategy == SearchStrategy::Random {
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            all.truncate(self.trials);
        }
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardConfig {
    pub fracdiff: FracDiffConfig,
    pub sae: SaeConfig,
    pub target: Target,
    pub search: SearchConfig,
    pub seed: u64,
}

/// Per-column standardization fit on train rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mut m = Vec::with_capacity(x.ncols());
        let mut s = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let v = col.to_vec();
            m.push(mean(&v));
            let sd = population_std(&v);
            // constant columns are centred but not scaled
            s.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Scaler { mean: m, std: s }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// Everything fitted for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitArtifacts {
    pub split: Split,
    /// Bars whose rows trained the model, after warm-up and purge.
    pub train_rows: Range<usize>,
    pub orders: Vec<FittedOrder>,
    pub scaler: Scaler,
    /// Divisor applied to regression targets.
    pub target_scale: f64,
    pub model: Option<SaeModel>,
    pub chosen: Option<Candidate>,
    pub train_phi: Option<f64>,
    pub note: Option<String>,
}

/// Serializable per-split metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub index: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub train_rows: Range<usize>,
    pub d: BTreeMap<String, f64>,
    pub windows: BTreeMap<String, usize>,
    pub log: Option<TrainingLog>,
    pub chosen: Option<Candidate>,
    pub train_phi: Option<f64>,
    pub note: Option<String>,
}

impl SplitArtifacts {
    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            index: self.split.index,
            train: self.split.train.clone(),
            test: self.split.test.clone(),
            train_rows: self.train_rows.clone(),
            d: self.orders.iter().map(|o| (o.name.clone(), o.d)).collect(),
            windows: self.orders.iter().map(|o| (o.name.clone(), o.weights.len())).collect(),
            log: self.model.as_ref().map(|m| m.log.clone()),
            chosen: self.chosen,
            train_phi: self.train_phi,
            note: self.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkForwardResult {
    /// Bar indices of the out-of-sample predictions, ascending.
    pub indices: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub predictions: Predictions,
    pub splits: Vec<SplitArtifacts>,
}

/// Fits the differencing order of one train column. A constant column keeps d = 0.
fn fit_order(name: &str, train: &[f64], cfg: &FracDiffConfig) -> Result<FittedOrder> {
    if train.iter().all(|v| *v == train[0]) {
        return Ok(FittedOrder {
            name: name.to_string(),
            d: 0.0,
            weights: vec![1.0],
        });
    }
    let (d, _) = optimal_d(train, cfg).map_err(|e| Error::Validation(format!("feature `{name}`: {e}")))?;
    Ok(FittedOrder {
        name: name.to_string(),
        d,
        weights: fd_weights(d, cfg.tau, cfg.max_weights)?,
    })
}

struct Prepared {
    x_train: Array2<f64>,
    x_test: Array2<f64>,
    y_train: Targets,
    train_rows: Range<usize>,
    orders: Vec<FittedOrder>,
    scaler: Scaler,
    target_scale: f64,
}

fn prepare(
    split: &Split,
    features: &FeatureFrame,
    targets: &TargetValues,
    cfg: &WalkForwardConfig,
) -> Result<Prepared> {
    let orders: Vec<FittedOrder> = (0..features.width())
        .map(|j| {
            let col = features.values.column(j);
            let train: Vec<f64> = col.slice(ndarray::s![split.train.clone()]).to_vec();
            fit_order(&features.names[j], &train, &cfg.fracdiff)
        })
        .collect::<Result<_>>()?;

    // rows before the longest window have no complete history
    let warm = orders.iter().map(|o| o.weights.len() - 1).max().unwrap_or(0);
    let start = split.train.start.max(warm);
    let purge = cfg.target.lookahead();
    let train_end = split.train.end.saturating_sub(purge);
    if train_end < start + 10 {
        return Err(Error::SeriesTooShort {
            required: start + 10 + purge - split.train.start,
            actual: split.train.len(),
        });
    }

    // differencing reaches back before `start`, never past the row being computed
    let rows = start..split.test.end;
    let mut x = Array2::zeros((rows.len(), features.width()));
    for (j, o) in orders.iter().enumerate() {
        let from = rows.start + 1 - o.weights.len();
        let src: Vec<f64> = features.values.column(j).slice(ndarray::s![from..rows.end]).to_vec();
        let out = ffd_apply(&src, &o.weights)?;
        x.column_mut(j).assign(&ndarray::Array1::from(out));
    }
    let n_train = train_end - start;
    let test_offset = split.test.start - start;
    let raw_train = x.slice(ndarray::s![..n_train, ..]);
    let scaler = Scaler::fit(raw_train);
    let x_train = scaler.transform(raw_train);
    let x_test = scaler.transform(x.slice(ndarray::s![test_offset.., ..]));

    let mut y_train = targets.slice(start..train_end);
    let mut target_scale = 1.0;
    if let Targets::Values(v) = &mut y_train {
        // scale only, so the sign of every target is preserved
        let sd = population_std(v);
        if sd > 0.0 {
            target_scale = sd;
            v.iter_mut().for_each(|y| *y /= sd);
        }
    }
    Ok(Prepared {
        x_train,
        x_test,
        y_train,
        train_rows: start..train_end,
        orders,
        scaler,
        target_scale,
    })
}

fn search_score(model: &SaeModel, x: ArrayView2<f64>, y: &Targets, target: &Target) -> Result<f64> {
    let pred = model.predict(x)?;
    Ok(match (target, pred, y) {
        (Target::Tbl { spec, delta }, Predictions::Labels(p), Targets::Labels(a)) => {
            phi(&payoff_counts(&p, a)?, &PhiParams::new(spec.lambda, *delta)?, true)?
        }
        (_, Predictions::Labels(p), Targets::Labels(a)) => {
            p.iter().zip(a).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
        }
        (_, Predictions::Values(p), Targets::Values(a)) => {
            -p.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
        }
        _ => return Err(Error::Validation("prediction and target kinds differ".into())),
    })
}

/// Picks the best candidate on the last `validation_fraction` of the train rows, with
/// the scaler refit on the remaining rows and a purge gap in between.
fn search(prep: &Prepared, base: &SaeConfig, cfg: &WalkForwardConfig, seed: u64) -> Result<Candidate> {
    let n = prep.x_train.nrows();
    let n_val = ((n as f64) * cfg.search.validation_fraction).round() as usize;
    let purge = cfg.target.lookahead();
    if n_val == 0 || n < n_val + purge + 10 {
        return Err(Error::SeriesTooShort {
            required: n_val.max(1) + purge + 10,
            actual: n,
        });
    }
    let fit_end = n - n_val - purge;
    let idx = |r: Range<usize>| -> Vec<usize> { r.collect() };
    let sub = |t: &Targets, r: Range<usize>| match t {
        Targets::Values(v) => Targets::Values(v[r].to_vec()),
        Targets::Labels(l) => Targets::Labels(l[r].to_vec()),
    };
    let fit_rows = prep.x_train.select(Axis(0), &idx(0..fit_end));
    let scaler = Scaler::fit(fit_rows.view());
    let x_fit = scaler.transform(fit_rows.view());
    let x_val = scaler.transform(prep.x_train.select(Axis(0), &idx(n - n_val..n)).view());
    let y_fit = sub(&prep.y_train, 0..fit_end);
    let y_val = sub(&prep.y_train, n - n_val..n);

    let mut best: Option<(f64, Candidate)> = None;
    for cand in cfg.search.candidates(base, seed) {
        let model = train(&cand.apply(base), x_fit.view(), &y_fit)?;
        let score = search_score(&model, x_val.view(), &y_val, &cfg.target)?;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, cand));
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| Error::Empty("search produced no candidates".into()))
}

fn single_class(y: &Targets) -> Option<Label> {
    match y {
        Targets::Labels(l) if !l.is_empty() && l.iter().all(|v| *v == l[0]) => Some(l[0]),
        _ => None,
    }
}

fn run_split(
    split: &Split,
    features: &FeatureFrame,
    targets: &TargetValues,
    cfg: &WalkForwardConfig,
) -> Result<(SplitArtifacts, Predictions)> {
    let prep = prepare(split, features, targets, cfg)?;
    let seed = cfg.seed ^ split.index as u64;
    let base = SaeConfig {
        input_dim: features.width(),
        output_mode: cfg.target.output_mode(),
        seed,
        ..cfg.sae.clone()
    };
    let mut artifacts = SplitArtifacts {
        split: split.clone(),
        train_rows: prep.train_rows.clone(),
        orders: prep.orders.clone(),
        scaler: prep.scaler.clone(),
        target_scale: prep.target_scale,
        model: None,
        chosen: None,
        train_phi: None,
        note: None,
    };

    if let Some(class) = single_class(&prep.y_train) {
        if base.output_mode != OutputMode::Ternary {
            return Err(Error::SingleClass {
                split: split.index,
                class,
            });
        }
        // cross-entropy is degenerate here: stay flat through the test period
        artifacts.note = Some(format!("single-class train slice (all labels {class}); model not trained, test predictions flat"));
        return Ok((artifacts, Predictions::Labels(vec![0; split.test.len()])));
    }

    let config = if cfg.search.enabled {
        let cand = search(&prep, &base, cfg, seed)?;
        artifacts.chosen = Some(cand);
        cand.apply(&base)
    } else {
        base
    };
    let model = train(&config, prep.x_train.view(), &prep.y_train)?;
    let mut preds = model.predict(prep.x_test.view())?;
    if let Predictions::Values(v) = &mut preds {
        v.iter_mut().for_each(|p| *p *= prep.target_scale);
    }
    if let (Target::Tbl { spec, delta }, Targets::Labels(actual)) = (&cfg.target, &prep.y_train) {
        if let Predictions::Labels(p) = model.predict(prep.x_train.view())? {
            artifacts.train_phi = Some(phi(&payoff_counts(&p, actual)?, &PhiParams::new(spec.lambda, *delta)?, true)?);
        }
    }
    artifacts.model = Some(model);
    Ok((artifacts, preds))
}

/// Runs every split of `plan`, in parallel, and concatenates the out-of-sample
/// predictions in chronological order. Any failing split aborts the run.
pub fn run_walkforward(
    bars: &BarSeries,
    features: &FeatureFrame,
    plan: &WalkForwardPlan,
    cfg: &WalkForwardConfig,
) -> Result<WalkForwardResult> {
    if features.timestamps != bars.timestamps {
        return Err(Error::Validation("features must be aligned to the bars".into()));
    }
    cfg.fracdiff.validate()?;
    if cfg.search.enabled {
        cfg.search.validate()?;
    }
    if let Target::Tbl { spec, delta } = &cfg.target {
        PhiParams::new(spec.lambda, *delta)?;
    }
    if let Some(s) = plan.splits.last() {
        if s.test.end > bars.len() {
            return Err(Error::SeriesTooShort {
                required: s.test.end,
                actual: bars.len(),
            });
        }
    }
    let targets = cfg.target.compute(bars)?;

    let outcomes: Vec<Result<(SplitArtifacts, Predictions)>> = plan
        .splits
        .par_iter()
        .map(|s| {
            run_split(s, features, &targets, cfg).map_err(|e| Error::Split {
                index: s.index,
                source: Box::new(e),
            })
        })
        .collect();

    let mut splits = Vec::with_capacity(outcomes.len());
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for outcome in outcomes {
        let (art, preds) = outcome?;
        indices.extend(art.split.test.clone());
        match preds {
            Predictions::Values(v) => values.extend(v),
            Predictions::Labels(l) => labels.extend(l),
        }
        splits.push(art);
    }
    let predictions = if cfg.target.output_mode() == OutputMode::Regression {
        Predictions::Values(values)
    } else {
        Predictions::Labels(labels)
    };
    Ok(WalkForwardResult {
        timestamps: indices.iter().map(|&i| bars.timestamps[i]).collect(),
        indices,
        predictions,
        splits,
    })
}

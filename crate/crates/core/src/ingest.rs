//! Loading, validation, resampling and alignment of OHLC bars and feature series.
//!
//! Timestamps are UTC epoch seconds throughout. Market-closure gaps are kept as
//! gaps: nothing is filled, and resampling windows are anchored to wall-clock
//! multiples of the target frequency.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamped OHLC(V) bars for one instrument at one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarSeries {
    pub symbol: String,
    /// Bar spacing in minutes.
    pub frequency: u32,
    pub timestamps: Vec<i64>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: Option<f64>,
}

impl BarSeries {
    /// Builds a series from rows, sorting by timestamp and enforcing every invariant.
    pub fn from_bars(symbol: impl Into<String>, frequency: Option<u32>, mut rows: Vec<Bar>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("bar series has no rows".into()));
        }
        rows.sort_by_key(|b| b.timestamp);

        let dups: Vec<String> = rows
            .windows(2)
            .filter(|w| w[0].timestamp == w[1].timestamp)
            .map(|w| format_ts(w[0].timestamp))
            .collect();
        if !dups.is_empty() {
            return Err(Error::Validation(format!("duplicate timestamps: {}", dups.join(", "))));
        }

        let bad: Vec<String> = rows
            .iter()
            .filter(|b| !bar_is_valid(b))
            .map(|b| format_ts(b.timestamp))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "OHLC invariant violated (need positive finite prices, low <= min(open, close), high >= max(open, close), volume >= 0) at: {}",
                bad.join(", ")
            )));
        }

        let has_volume = rows[0].volume.is_some();
        if rows.iter().any(|b| b.volume.is_some() != has_volume) {
            return Err(Error::Validation("volume column is only partially populated".into()));
        }

        let timestamps: Vec<i64> = rows.iter().map(|b| b.timestamp).collect();
        let frequency = match frequency {
            Some(f) if f > 0 => f,
            Some(_) => return Err(Error::InvalidParameter("frequency must be positive".into())),
            None => infer_frequency(&timestamps)?,
        };
        let step = i64::from(frequency) * 60;
        if let Some(w) = timestamps.windows(2).find(|w| (w[1] - w[0]) % step != 0) {
            return Err(Error::Validation(format!(
                "irregular spacing between {} and {} for a {frequency}-minute series",
                format_ts(w[0]),
                format_ts(w[1])
            )));
        }

        Ok(BarSeries {
            symbol: symbol.into(),
            frequency,
            timestamps,
            open: rows.iter().map(|b| b.open).collect(),
            high: rows.iter().map(|b| b.high).collect(),
            low: rows.iter().map(|b| b.low).collect(),
            close: rows.iter().map(|b| b.close).collect(),
            volume: has_volume.then(|| rows.iter().map(|b| b.volume.unwrap_or(0.0)).collect()),
        })
    }

    /// Bars built from a close path alone (open = high = low = close).
    pub fn from_closes(symbol: impl Into<String>, frequency: u32, start: i64, closes: &[f64]) -> Result<Self> {
        let step = i64::from(frequency) * 60;
        let rows = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| Bar {
                timestamp: start + i as i64 * step,
                open: c,
                high: c,
                low: c,
                close: c,
                volume: None,
            })
            .collect();
        Self::from_bars(symbol, Some(frequency), rows)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn bar(&self, i: usize) -> Bar {
        Bar {
            timestamp: self.timestamps[i],
            open: self.open[i],
            high: self.high[i],
            low: self.low[i],
            close: self.close[i],
            volume: self.volume.as_ref().map(|v| v[i]),
        }
    }

    pub fn bars(&self) -> impl Iterator<Item = Bar> + '_ {
        (0..self.len()).map(move |i| self.bar(i))
    }

    /// Sub-series over an index range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> BarSeries {
        BarSeries {
            symbol: self.symbol.clone(),
            frequency: self.frequency,
            timestamps: self.timestamps[range.clone()].to_vec(),
            open: self.open[range.clone()].to_vec(),
            high: self.high[range.clone()].to_vec(),
            low: self.low[range.clone()].to_vec(),
            close: self.close[range.clone()].to_vec(),
            volume: self.volume.as_ref().map(|v| v[range].to_vec()),
        }
    }

    /// Writes the bars after `header`, which should be empty or `#` comment lines.
    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut out = String::from(header);
        out.push_str("timestamp,open,high,low,close");
        if self.volume.is_some() {
            out.push_str(",volume");
        }
        out.push('\n');
        for b in self.bars() {
            out.push_str(&format!("{},{},{},{},{}", b.timestamp, b.open, b.high, b.low, b.close));
            if let Some(v) = b.volume {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

fn bar_is_valid(b: &Bar) -> bool {
    let prices = [b.open, b.high, b.low, b.close];
    prices.iter().all(|p| p.is_finite() && *p > 0.0)
        && b.low <= b.open.min(b.close)
        && b.high >= b.open.max(b.close)
        && b.volume.is_none_or(|v| v.is_finite() && v >= 0.0)
}

fn infer_frequency(timestamps: &[i64]) -> Result<u32> {
    let min_gap = timestamps.windows(2).map(|w| w[1] - w[0]).min();
    match min_gap {
        // A single bar carries no spacing information.
        None => Ok(1),
        Some(gap) if gap % 60 != 0 => Err(Error::Validation(format!(
            "bar spacing of {gap} s is not a whole number of minutes"
        ))),
        Some(gap) => u32::try_from(gap / 60).map_err(|_| Error::Validation("bar spacing too large".into())),
    }
}

/// Parses ISO-8601 (with or without offset, date-only allowed) or epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(secs) = s.parse::<f64>() {
        if secs.is_finite() && secs.fract() == 0.0 {
            return Some(secs as i64);
        }
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_ts(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<f64> {
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column `{name}`"),
    })?;
    raw.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column `{name}`: cannot parse `{raw}` as a number"),
    })
}

/// Loads a `timestamp,open,high,low,close[,volume]` CSV; frequency is inferred from the
/// smallest spacing.
pub fn load_bars(path: &Path, symbol: &str) -> Result<BarSeries> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    let expected = ["timestamp", "open", "high", "low", "close"];
    let has_volume = match cols.len() {
        5 => false,
        6 if cols[5] == "volume" => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `timestamp,open,high,low,close[,volume]`, found `{}`", cols.join(",")),
            })
        }
    };
    if cols[..5] != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `timestamp,open,high,low,close[,volume]`, found `{}`", cols.join(",")),
        });
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", cols.len(), record.len()),
            });
        }
        let raw_ts = &record[0];
        let timestamp = parse_timestamp(raw_ts).ok_or_else(|| Error::Parse {
            line,
            message: format!("cannot parse timestamp `{raw_ts}`"),
        })?;
        rows.push(Bar {
            timestamp,
            open: parse_field(&record, 1, "open", line)?,
            high: parse_field(&record, 2, "high", line)?,
            low: parse_field(&record, 3, "low", line)?,
            close: parse_field(&record, 4, "close", line)?,
            volume: if has_volume {
                Some(parse_field(&record, 5, "volume", line)?)
            } else {
                None
            },
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} contains no bars", path.display())));
    }
    BarSeries::from_bars(symbol, None, rows)
}

/// Aggregates bars into wall-clock-anchored windows of `target` minutes.
///
/// The final window is dropped when the source ends before the window does.
pub fn resample(bars: &BarSeries, target: u32) -> Result<BarSeries> {
    if target == 0 || !target.is_multiple_of(bars.frequency) {
        return Err(Error::InvalidParameter(format!(
            "target frequency {target} min is not a positive multiple of the source frequency {} min",
            bars.frequency
        )));
    }
    if target == bars.frequency {
        return Ok(bars.clone());
    }
    let width = i64::from(target) * 60;
    let src_step = i64::from(bars.frequency) * 60;

    let mut out: Vec<Bar> = Vec::new();
    let mut current: Option<(i64, Bar)> = None;
    for b in bars.bars() {
        let window = b.timestamp.div_euclid(width) * width;
        match current.as_mut() {
            Some((w, agg)) if *w == window => {
                agg.high = agg.high.max(b.high);
                agg.low = agg.low.min(b.low);
                agg.close = b.close;
                agg.volume = agg.volume.zip(b.volume).map(|(a, v)| a + v);
            }
            _ => {
                if let Some((_, agg)) = current.take() {
                    out.push(agg);
                }
                current = Some((window, Bar { timestamp: window, ..b }));
            }
        }
    }
    if let Some((window, agg)) = current {
        let last = *bars.timestamps.last().expect("non-empty series");
        if last + src_step >= window + width {
            out.push(agg);
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "no complete {target}-minute window in {} bars",
            bars.len()
        )));
    }
    BarSeries::from_bars(bars.symbol.clone(), Some(target), out)
}

/// A raw feature series as released: ascending `(timestamp, value)` observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeature {
    pub name: String,
    pub observations: Vec<(i64, f64)>,
}

pub fn load_feature(path: &Path, name: &str) -> Result<RawFeature> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if cols != ["timestamp", "value"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `timestamp,value`, found `{}`", cols.join(",")),
        });
    }
    let mut observations = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let ts = parse_timestamp(record.get(0).unwrap_or("")).ok_or_else(|| Error::Parse {
            line,
            message: format!("cannot parse timestamp `{}`", record.get(0).unwrap_or("")),
        })?;
        let value = parse_field(&record, 1, "value", line)?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                message: "feature value is not finite".into(),
            });
        }
        observations.push((ts, value));
    }
    if observations.is_empty() {
        return Err(Error::Empty(format!("feature file {} has no rows", path.display())));
    }
    observations.sort_by_key(|o| o.0);
    if let Some(w) = observations.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Validation(format!(
            "feature `{name}` has duplicate timestamp {}",
            format_ts(w[0].0)
        )));
    }
    Ok(RawFeature {
        name: name.to_string(),
        observations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignPolicy {
    #[default]
    ForwardFill,
    /// Keep only bar timestamps at which every feature has an exact observation.
    Drop,
}

/// Feature matrix on the traded asset's bar axis (rows = timestamps, cols = features).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub names: Vec<String>,
    pub timestamps: Vec<i64>,
    pub values: Array2<f64>,
    pub policy: AlignPolicy,
}

impl FeatureFrame {
    pub fn from_columns(names: Vec<String>, timestamps: Vec<i64>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", names.len()),
                actual: format!("{} columns", columns.len()),
            });
        }
        let rows = timestamps.len();
        if let Some(c) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows} rows"),
                actual: format!("{} rows", c.len()),
            });
        }
        let values = Array2::from_shape_fn((rows, columns.len()), |(i, j)| columns[j][i]);
        Ok(FeatureFrame {
            names,
            timestamps,
            values,
            policy: AlignPolicy::ForwardFill,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).to_vec()
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut out = String::from(header);
        out.push_str("timestamp");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, ts) in self.timestamps.iter().enumerate() {
            out.push_str(&ts.to_string());
            for v in self.values.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

/// Joins release-style feature series onto the bar axis.
///
/// Rows before the first observation of the latest-starting feature are dropped.
pub fn align_features(bars: &BarSeries, features: &[RawFeature], policy: AlignPolicy) -> Result<FeatureFrame> {
    let last_bar = *bars
        .timestamps
        .last()
        .ok_or_else(|| Error::Empty("bar series is empty".into()))?;
    for f in features {
        let first = f
            .observations
            .first()
            .ok_or_else(|| Error::Empty(format!("feature `{}` has no observations", f.name)))?;
        if f.observations.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Validation(format!(
                "feature `{}` is not strictly ascending in time",
                f.name
            )));
        }
        if first.0 > last_bar {
            return Err(Error::Validation(format!(
                "feature `{}` starts at {}, after the last bar {}",
                f.name,
                format_ts(first.0),
                format_ts(last_bar)
            )));
        }
    }

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); features.len()];
    let mut cursors = vec![0usize; features.len()];
    for &ts in &bars.timestamps {
        let mut row = Vec::with_capacity(features.len());
        for (f, cursor) in features.iter().zip(cursors.iter_mut()) {
            while *cursor < f.observations.len() && f.observations[*cursor].0 <= ts {
                *cursor += 1;
            }
            let latest = (*cursor > 0).then(|| f.observations[*cursor - 1]);
            let value = match (policy, latest) {
                (AlignPolicy::ForwardFill, Some((_, v))) => Some(v),
                (AlignPolicy::Drop, Some((obs_ts, v))) if obs_ts == ts => Some(v),
                _ => None,
            };
            row.push(value);
        }
        if row.iter().all(Option::is_some) {
            timestamps.push(ts);
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(v.expect("checked above"));
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Empty("no bar timestamp has a value for every feature".into()));
    }
    let mut frame = FeatureFrame::from_columns(features.iter().map(|f| f.name.clone()).collect(), timestamps, &columns)?;
    frame.policy = policy;
    Ok(frame)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

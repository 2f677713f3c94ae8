//! CSV time-series ingestion, sliding windows, MinMax scaling and RMSE.
//!
//! Discontinuities split a series into segments: a row with a missing value
//! ends the current segment, and with a timestamp column so does any gap
//! longer than 1.5 times the median sampling period. Windows never span two
//! segments.

use std::ops::Range;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Mat;

/// Corpus size for which the test split is fixed to 831 pairs.
pub const REFERENCE_PAIRS: usize = 15_258;
pub const REFERENCE_TEST_PAIRS: usize = 831;
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: cannot parse timestamp `{value}`")]
    Timestamp { row: usize, value: String },
    #[error("row {row}: timestamps must increase")]
    Unordered { row: usize },
    #[error("no usable data: {0}")]
    Empty(String),
    #[error("scaler has not been fitted")]
    Unfitted,
    #[error("invalid split: {0}")]
    Split(String),
    #[error("scaler columns {expected:?} do not match data columns {found:?}")]
    ScalerMismatch { expected: Vec<String>, found: Vec<String> },
}

/// A gap-free run of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// 1-based data row of the first entry.
    pub first_row: usize,
    /// `len × columns`, row-major.
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<i64>>,
}

impl Segment {
    pub fn len(&self, columns: usize) -> usize {
        self.values.len() / columns.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub columns: Vec<String>,
    pub target: usize,
    pub segments: Vec<Segment>,
}

impl TimeSeries {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.len(self.width())).sum()
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || ["na", "nan", "null", "none"].iter().any(|m| c.eq_ignore_ascii_case(m))
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

/// Reads a CSV with a header row. Every column other than the timestamp is
/// a numeric feature unless `features` narrows the selection.
pub fn ingest(text: &str, target: &str, timestamp: Option<&str>, features: Option<&[String]>) -> Result<TimeSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::UnknownColumn(name.to_string()));
    let ts_col = timestamp.map(find).transpose()?;
    let cols: Vec<usize> = match features {
        Some(f) => f.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|&i| Some(i) != ts_col).collect(),
    };
    let mut cols = cols;
    let t = find(target)?;
    if Some(t) == ts_col {
        return Err(DataError::UnknownColumn(format!("{target} (timestamp column cannot be the target)")));
    }
    if !cols.contains(&t) {
        cols.push(t);
    }
    let names: Vec<String> = cols.iter().map(|&i| header[i].clone()).collect();
    let target_idx = cols.iter().position(|&i| i == t).expect("target included");

    // None marks a row with a missing value
    let mut rows: Vec<Option<(Option<i64>, Vec<f64>)>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let ts = match ts_col {
            Some(c) => {
                let cell = rec.get(c).unwrap_or("");
                if is_missing(cell) {
                    rows.push(None);
                    continue;
                }
                Some(parse_timestamp(cell).ok_or_else(|| DataError::Timestamp { row, value: cell.to_string() })?)
            }
            None => None,
        };
        let mut vals = Vec::with_capacity(cols.len());
        let mut missing = false;
        for (&c, name) in cols.iter().zip(&names) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric { row, column: name.clone(), value: cell.to_string() })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric { row, column: name.clone(), value: cell.to_string() });
            }
            vals.push(v);
        }
        rows.push(if missing { None } else { Some((ts, vals)) });
    }

    let period = ts_col.and_then(|_| {
        let stamps: Vec<i64> = rows.iter().flatten().filter_map(|(t, _)| *t).collect();
        let mut diffs: Vec<i64> = stamps.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0).collect();
        diffs.sort_unstable();
        (!diffs.is_empty()).then(|| {
            let k = diffs.len();
            if k % 2 == 1 {
                diffs[k / 2] as f64
            } else {
                (diffs[k / 2 - 1] + diffs[k / 2]) as f64 / 2.0
            }
        })
    });

    let mut segments = Vec::new();
    let mut cur: Option<Segment> = None;
    let mut last_ts: Option<i64> = None;
    for (i, r) in rows.into_iter().enumerate() {
        let row = i + 1;
        let Some((ts, vals)) = r else {
            segments.extend(cur.take());
            continue;
        };
        if let (Some(t), Some(prev)) = (ts, last_ts) {
            if t <= prev {
                return Err(DataError::Unordered { row });
            }
            if period.is_some_and(|p| (t - prev) as f64 > 1.5 * p) {
                segments.extend(cur.take());
            }
        }
        last_ts = ts.or(last_ts);
        let seg = cur.get_or_insert_with(|| Segment { first_row: row, values: Vec::new(), timestamps: ts.map(|_| Vec::new()) });
        seg.values.extend(vals);
        if let (Some(v), Some(t)) = (seg.timestamps.as_mut(), ts) {
            v.push(t);
        }
    }
    segments.extend(cur);
    Ok(TimeSeries { columns: names, target: target_idx, segments })
}

/// Per-column MinMax scaling fitted on training rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub columns: Vec<String>,
    pub target: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<'a>(columns: &[String], target: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Self, DataError> {
        let k = columns.len();
        let mut min = vec![f64::INFINITY; k];
        let mut max = vec![f64::NEG_INFINITY; k];
        let mut any = false;
        for r in rows {
            any = true;
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if !any {
            return Err(DataError::Empty("no rows to fit the scaler".into()));
        }
        Ok(MinMaxScaler { columns: columns.to_vec(), target, min, max })
    }

    pub fn is_fitted(&self) -> bool {
        !self.min.is_empty() && self.min.len() == self.max.len()
    }

    fn check(&self, col: usize) -> Result<(), DataError> {
        if !self.is_fitted() || col >= self.min.len() {
            return Err(DataError::Unfitted);
        }
        Ok(())
    }

    pub fn transform(&self, col: usize, v: f64) -> Result<f64, DataError> {
        self.check(col)?;
        let (lo, hi) = (self.min[col], self.max[col]);
        Ok(if hi == lo { 0.0 } else { (v - lo) / (hi - lo) })
    }

    pub fn inverse(&self, col: usize, z: f64) -> Result<f64, DataError> {
        self.check(col)?;
        let (lo, hi) = (self.min[col], self.max[col]);
        Ok(if hi == lo { lo } else { z * (hi - lo) + lo })
    }

    pub fn inverse_target(&self, z: f64) -> Result<f64, DataError> {
        self.inverse(self.target, z)
    }

    /// Scales every row of a `rows × columns` matrix in place.
    pub fn transform_rows(&self, values: &mut [f64]) -> Result<(), DataError> {
        let k = self.min.len();
        if !self.is_fitted() {
            return Err(DataError::Unfitted);
        }
        for row in values.chunks_mut(k) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.transform(j, *v)?;
            }
        }
        Ok(())
    }
}

/// Root mean squared error in original units.
pub fn rmse(predictions: &[f64], targets: &[f64], scaler: &MinMaxScaler) -> Result<f64, DataError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(DataError::Empty(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let mut s = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        let e = scaler.inverse_target(p)? - scaler.inverse_target(t)?;
        s += e * e;
    }
    Ok((s / predictions.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    /// The fixed reference count for a corpus of [`REFERENCE_PAIRS`] pairs,
    /// otherwise the given fraction.
    Auto(f64),
    Fraction(f64),
    Count(usize),
}

impl Default for Split {
    fn default() -> Self {
        Split::Auto(DEFAULT_TEST_FRACTION)
    }
}

impl Split {
    pub fn test_count(&self, pairs: usize) -> Result<usize, DataError> {
        let frac = |f: f64| {
            if !(0.0..1.0).contains(&f) {
                return Err(DataError::Split(format!("test fraction {f} outside [0, 1)")));
            }
            Ok(((pairs as f64 * f).round() as usize).max(usize::from(f > 0.0)))
        };
        let k = match *self {
            Split::Auto(_) if pairs == REFERENCE_PAIRS => REFERENCE_TEST_PAIRS,
            Split::Auto(f) | Split::Fraction(f) => frac(f)?,
            Split::Count(c) => c,
        };
        if k >= pairs {
            return Err(DataError::Split(format!("{k} test pairs leave no training data out of {pairs}")));
        }
        Ok(k)
    }
}

/// Windowed, normalized pairs with a chronological train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub seq_len: usize,
    pub columns: usize,
    /// `pairs · seq_len × columns`, normalized.
    pub x: Mat,
    /// Normalized targets.
    pub y: Vec<f64>,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub scaler: MinMaxScaler,
    /// Timestamp of each pair's target, when known.
    pub target_times: Option<Vec<i64>>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Stacked windows and targets of a pair range.
    pub fn subset(&self, r: Range<usize>) -> (Mat, Vec<f64>) {
        (self.x.rows_slice(r.start * self.seq_len, r.len() * self.seq_len), self.y[r].to_vec())
    }

    pub fn gather(&self, idx: &[usize]) -> (Mat, Vec<f64>) {
        let w = self.seq_len * self.columns;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.x.data[i * w..(i + 1) * w]);
        }
        (Mat::from_vec(idx.len() * self.seq_len, self.columns, data), idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Builds every in-segment window of `n` rows followed by its target.
pub fn window(series: &TimeSeries, n: usize, split: Split) -> Result<WindowedDataset, DataError> {
    window_impl(series, n, split, None)
}

/// Like [`window`], but normalizes with an already fitted scaler, e.g. the
/// one stored alongside a trained model.
pub fn window_with_scaler(series: &TimeSeries, n: usize, split: Split, scaler: &MinMaxScaler) -> Result<WindowedDataset, DataError> {
    check_scaler(series, scaler)?;
    window_impl(series, n, split, Some(scaler))
}

fn check_scaler(series: &TimeSeries, scaler: &MinMaxScaler) -> Result<(), DataError> {
    if scaler.columns != series.columns || scaler.target != series.target {
        return Err(DataError::ScalerMismatch { expected: scaler.columns.clone(), found: series.columns.clone() });
    }
    Ok(())
}

/// The normalized final `n` rows of the last segment, the input for a
/// forecast one step past the data.
pub fn latest_window(series: &TimeSeries, n: usize, scaler: &MinMaxScaler) -> Result<Mat, DataError> {
    check_scaler(series, scaler)?;
    let k = series.width();
    let seg = series.segments.last().filter(|s| s.len(k) >= n).ok_or_else(|| DataError::Empty(format!("the last segment is shorter than {n} rows")))?;
    let mut x = seg.values[seg.values.len() - n * k..].to_vec();
    scaler.transform_rows(&mut x)?;
    Ok(Mat::from_vec(n, k, x))
}

fn window_impl(series: &TimeSeries, n: usize, split: Split, fitted: Option<&MinMaxScaler>) -> Result<WindowedDataset, DataError> {
    if n == 0 {
        return Err(DataError::Split("window length must be positive".into()));
    }
    let k = series.width();
    // (segment, target row within segment)
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (s, seg) in series.segments.iter().enumerate() {
        let len = seg.len(k);
        pairs.extend((n..len).map(|t| (s, t)));
    }
    if pairs.is_empty() {
        return Err(DataError::Empty(format!("no segment is longer than the window length {n}")));
    }
    let test_count = split.test_count(pairs.len())?;
    let n_train = pairs.len() - test_count;

    // rows up to and including the last training target
    let (last_seg, last_t) = pairs[n_train - 1];
    let fit_rows = series.segments[..=last_seg].iter().enumerate().flat_map(|(s, seg)| {
        let upto = if s == last_seg { last_t + 1 } else { seg.len(k) };
        seg.values[..upto * k].chunks(k)
    });
    let scaler = match fitted {
        Some(s) => s.clone(),
        None => MinMaxScaler::fit(&series.columns, series.target, fit_rows)?,
    };

    let mut x = Vec::with_capacity(pairs.len() * n * k);
    let mut y = Vec::with_capacity(pairs.len());
    let mut times = series.segments.iter().all(|s| s.timestamps.is_some()).then(Vec::new);
    for &(s, t) in &pairs {
        let seg = &series.segments[s];
        x.extend_from_slice(&seg.values[(t - n) * k..t * k]);
        y.push(scaler.transform(series.target, seg.values[t * k + series.target])?);
        if let (Some(v), Some(ts)) = (times.as_mut(), seg.timestamps.as_ref()) {
            v.push(ts[t]);
        }
    }
    scaler.transform_rows(&mut x)?;
    Ok(WindowedDataset {
        seq_len: n,
        columns: k,
        x: Mat::from_vec(pairs.len() * n, k, x),
        y,
        train: 0..n_train,
        test: n_train..pairs.len(),
        scaler,
        target_times: times,
    })
}

/// Deterministic multivariate series with daily seasonality: an hourly
/// timestamp, temperature, humidity and a pollutant target driven by both.
pub fn synthetic_csv(points: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("midnight");
    let mut out = String::from("timestamp,temperature,humidity,pm25\n");
    let mut noise = 0.0f64;
    let mut pm = 12.0f64;
    let tau = std::f64::consts::TAU;
    for t in 0..points {
        let day = (t as f64) * tau / 24.0;
        let week = (t as f64) * tau / (24.0 * 7.0);
        noise = 0.8 * noise + rng.gen_range(-0.5..0.5);
        let temp = 15.0 + 6.0 * (day - 1.0).sin() + 2.0 * week.sin() + noise;
        let hum = 55.0 - 12.0 * (day - 1.0).sin() + 4.0 * week.cos() + rng.gen_range(-1.5..1.5);
        pm = 0.7 * pm + 0.3 * (8.0 + 0.4 * (hum - 40.0) - 0.3 * (temp - 15.0) + 3.0 * (day + 0.5).sin()) + rng.gen_range(-0.6..0.6);
        let ts = start + chrono::Duration::hours(t as i64);
        out.push_str(&format!("{},{:.3},{:.3},{:.3}\n", ts.format("%Y-%m-%dT%H:%M:%S"), temp, hum, pm));
    }
    out
}

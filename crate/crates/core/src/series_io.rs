//! Price-series ingestion: OHLCV CSV parsing, time-index validation,
//! chronological splitting, min-max normalisation and windowing into
//! supervised `(window, next value)` pairs.

use std::fmt;
use std::ops::Range;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("no data rows")]
    NoData,
    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: empty value in column {column:?}")]
    EmptyField { line: u64, column: &'static str },
    #[error("line {line}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { line: u64, timestamp: NaiveDateTime },
    #[error("line {line}: timestamp {timestamp} is earlier than the preceding {previous}")]
    Ordering {
        line: u64,
        timestamp: NaiveDateTime,
        previous: NaiveDateTime,
    },
    #[error("line {line}: {timestamp} is not a business day")]
    NotBusinessDay { line: u64, timestamp: NaiveDateTime },
    #[error("line {line}: invalid bar: {message}")]
    InvalidBar { line: u64, message: String },
    #[error("{0} partition is empty")]
    EmptyPartition(Partition),
    #[error("invalid split specification: {0}")]
    InvalidSplit(String),
    #[error("degenerate normalisation range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("insufficient data: {len} values for window length {window}")]
    InsufficientData { len: usize, window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Daily,
    Hourly,
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frequency::Daily => "daily",
            Frequency::Hourly => "hourly",
        })
    }
}

/// One OHLCV observation. `adj_close` is carried through but never used as
/// a modelling target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceBar {
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: Option<f64>,
    pub volume: f64,
}

impl PriceBar {
    fn check(&self) -> Result<(), String> {
        let fields = [self.open, self.high, self.low, self.close, self.volume];
        if fields.iter().any(|v| !v.is_finite()) || self.adj_close.is_some_and(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if !(self.low <= self.open && self.open <= self.high) {
            return Err(format!(
                "open {} outside [low {}, high {}]",
                self.open, self.low, self.high
            ));
        }
        if !(self.low <= self.close && self.close <= self.high) {
            return Err(format!(
                "close {} outside [low {}, high {}]",
                self.close, self.low, self.high
            ));
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        Ok(())
    }
}

/// An immutable, validated close-price series.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    symbol: String,
    frequency: Frequency,
    bars: Vec<PriceBar>,
}

impl PriceSeries {
    /// Validates bar contents, strict timestamp ordering and (for daily data)
    /// that every timestamp falls on a weekday.
    pub fn new(
        symbol: impl Into<String>,
        frequency: Frequency,
        bars: Vec<PriceBar>,
    ) -> Result<Self, SeriesError> {
        // Data lines start after the header.
        validate_bars(&bars, frequency, |i| i as u64 + 2)?;
        Ok(Self {
            symbol: symbol.into(),
            frequency,
            bars,
        })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn with_symbol(mut self, symbol: impl Into<String>) -> Self {
        self.symbol = symbol.into();
        self
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn bars(&self) -> &[PriceBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        self.bars.iter().map(|b| b.timestamp).collect()
    }

    /// Builds a series from plain close values, stamping consecutive
    /// business days (daily) or hours (hourly) from `start`. Open/high/low
    /// are set equal to the close.
    pub fn from_closes(
        symbol: impl Into<String>,
        frequency: Frequency,
        start: NaiveDateTime,
        closes: &[f64],
    ) -> Result<Self, SeriesError> {
        let mut ts = start;
        let mut bars = Vec::with_capacity(closes.len());
        for &close in closes {
            if frequency == Frequency::Daily {
                while !is_business_day(ts) {
                    ts += Duration::days(1);
                }
            }
            bars.push(PriceBar {
                timestamp: ts,
                open: close,
                high: close,
                low: close,
                close,
                adj_close: None,
                volume: 0.0,
            });
            ts += match frequency {
                Frequency::Daily => Duration::days(1),
                Frequency::Hourly => Duration::hours(1),
            };
        }
        Self::new(symbol, frequency, bars)
    }

    /// Returns a copy whose close prices are replaced by `closes`
    /// (open/high/low are widened to keep the bar consistent).
    pub fn with_closes(&self, closes: &[f64]) -> Result<Self, SeriesError> {
        if closes.len() != self.bars.len() {
            return Err(SeriesError::InvalidSplit(format!(
                "replacement has {} values, series has {}",
                closes.len(),
                self.bars.len()
            )));
        }
        let bars = self
            .bars
            .iter()
            .zip(closes)
            .map(|(b, &close)| PriceBar {
                close,
                high: b.high.max(close).max(b.open),
                low: b.low.min(close).min(b.open),
                ..*b
            })
            .collect();
        Self::new(self.symbol.clone(), self.frequency, bars)
    }

    fn slice(&self, range: Range<usize>) -> Self {
        Self {
            symbol: self.symbol.clone(),
            frequency: self.frequency,
            bars: self.bars[range].to_vec(),
        }
    }
}

fn validate_bars(
    bars: &[PriceBar],
    frequency: Frequency,
    line_of: impl Fn(usize) -> u64,
) -> Result<(), SeriesError> {
    for (i, bar) in bars.iter().enumerate() {
        let line = line_of(i);
        bar.check()
            .map_err(|message| SeriesError::InvalidBar { line, message })?;
        if frequency == Frequency::Daily && !is_business_day(bar.timestamp) {
            return Err(SeriesError::NotBusinessDay {
                line,
                timestamp: bar.timestamp,
            });
        }
        if i > 0 {
            let previous = bars[i - 1].timestamp;
            if bar.timestamp == previous {
                return Err(SeriesError::DuplicateTimestamp {
                    line,
                    timestamp: bar.timestamp,
                });
            }
            if bar.timestamp < previous {
                return Err(SeriesError::Ordering {
                    line,
                    timestamp: bar.timestamp,
                    previous,
                });
            }
        }
    }
    Ok(())
}

pub fn is_business_day(ts: NaiveDateTime) -> bool {
    !matches!(ts.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Parses `DD/MM/YYYY`, ISO-8601 dates and ISO-8601 date-times. Any UTC
/// offset is dropped, keeping the wall-clock time.
pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(text) {
        return Some(dt.naive_local());
    }
    const DATETIME_FORMATS: [&str; 6] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%d/%m/%Y %H:%M:%S",
        "%d/%m/%Y %H:%M",
    ];
    for fmt in DATETIME_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(dt);
        }
    }
    // Offsets such as "+00:00" after a space-separated date-time.
    if let Some((head, _)) = text.rsplit_once(['+', 'Z']) {
        if head.len() >= 16 && head != text {
            return parse_timestamp(head);
        }
    }
    for fmt in ["%Y-%m-%d", "%d/%m/%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(text, fmt) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

pub fn format_timestamp(ts: NaiveDateTime, frequency: Frequency) -> String {
    match frequency {
        Frequency::Daily if ts.time() == chrono::NaiveTime::MIN => ts.format("%Y-%m-%d").to_string(),
        _ => ts.format("%Y-%m-%d %H:%M:%S").to_string(),
    }
}

const COLUMNS: [&str; 6] = ["Date", "Open", "High", "Low", "Close", "Volume"];

/// Parses an RFC-4180 OHLCV CSV with a header row naming at least
/// `Date, Open, High, Low, Close, Volume` (`Adj Close` optional; column
/// order and letter case are free).
pub fn parse_csv(raw: &str, frequency: Frequency) -> Result<PriceSeries, SeriesError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SeriesError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(SeriesError::NoData);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name) || (name == "Date" && h.eq_ignore_ascii_case("Datetime")))
    };
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = find(name).ok_or(SeriesError::MissingColumn(name))?;
    }
    let adj_idx = find("Adj Close").or_else(|| find("AdjClose")).or_else(|| find("Adj_Close"));

    let mut bars = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SeriesError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |col: usize, name: &'static str| -> Result<&str, SeriesError> {
            match record.get(col) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("null") && !v.eq_ignore_ascii_case("nan") => Ok(v),
                _ => Err(SeriesError::EmptyField { line, column: name }),
            }
        };
        let number = |col: usize, name: &'static str| -> Result<f64, SeriesError> {
            let text = field(col, name)?;
            text.parse::<f64>().map_err(|_| SeriesError::Parse {
                line,
                message: format!("column {name:?}: cannot parse {text:?} as a number"),
            })
        };
        let date_text = field(idx[0], "Date")?;
        let timestamp = parse_timestamp(date_text).ok_or_else(|| SeriesError::Parse {
            line,
            message: format!("cannot parse timestamp {date_text:?}"),
        })?;
        let adj_close = match adj_idx {
            Some(col) => Some(number(col, "Adj Close")?),
            None => None,
        };
        bars.push(PriceBar {
            timestamp,
            open: number(idx[1], "Open")?,
            high: number(idx[2], "High")?,
            low: number(idx[3], "Low")?,
            close: number(idx[4], "Close")?,
            adj_close,
            volume: number(idx[5], "Volume")?,
        });
        lines.push(line);
    }
    if bars.is_empty() {
        return Err(SeriesError::NoData);
    }
    validate_bars(&bars, frequency, |i| lines[i])?;
    Ok(PriceSeries {
        symbol: String::new(),
        frequency,
        bars,
    })
}

/// Canonical CSV dump with ISO-8601 timestamps; `parse_csv` reads it back
/// to an identical series.
pub fn write_csv(series: &PriceSeries) -> String {
    let has_adj = series.bars.iter().any(|b| b.adj_close.is_some());
    let mut out = String::from("Date,Open,High,Low,Close,");
    if has_adj {
        out.push_str("Adj Close,");
    }
    out.push_str("Volume\n");
    for b in &series.bars {
        out.push_str(&format_timestamp(b.timestamp, series.frequency));
        out.push_str(&format!(",{},{},{},{},", b.open, b.high, b.low, b.close));
        if has_adj {
            out.push_str(&format!("{},", b.adj_close.unwrap_or(b.close)));
        }
        out.push_str(&format!("{}\n", b.volume));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "training",
            Partition::Validation => "validation",
            Partition::Test => "test",
        })
    }
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

impl TimeRange {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime) -> Self {
        Self { start, end }
    }

    /// Range covering whole calendar days `first..=last`.
    pub fn days(first: NaiveDate, last: NaiveDate) -> Self {
        Self {
            start: first.and_time(chrono::NaiveTime::MIN),
            end: (last + Duration::days(1)).and_time(chrono::NaiveTime::MIN),
        }
    }

    pub fn contains(&self, ts: NaiveDateTime) -> bool {
        self.start <= ts && ts < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: TimeRange,
    pub validation: TimeRange,
    pub test: TimeRange,
    pub declared_fractions: [f64; 3],
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

impl SplitSpec {
    pub fn new(
        train: TimeRange,
        validation: TimeRange,
        test: TimeRange,
        declared_fractions: [f64; 3],
    ) -> Result<Self, SeriesError> {
        for (name, r) in [("training", train), ("validation", validation), ("test", test)] {
            if r.end < r.start {
                return Err(SeriesError::InvalidSplit(format!(
                    "{name} range ends before it starts"
                )));
            }
        }
        if validation.start < train.end || test.start < validation.end {
            return Err(SeriesError::InvalidSplit(
                "ranges must be disjoint and ordered train < validation < test".into(),
            ));
        }
        let total: f64 = declared_fractions.iter().sum();
        if declared_fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 0.01 {
            return Err(SeriesError::InvalidSplit(format!(
                "declared fractions {declared_fractions:?} do not sum to 1"
            )));
        }
        Ok(Self {
            train,
            validation,
            test,
            declared_fractions,
        })
    }

    /// Daily preset: training 2000-01-01..=2020-12-31, validation
    /// 2021-01-01..=2022-06-30, test 2022-07-01..=2023-12-31.
    pub fn daily_default() -> Self {
        Self::new(
            TimeRange::days(ymd(2000, 1, 1), ymd(2020, 12, 31)),
            TimeRange::days(ymd(2021, 1, 1), ymd(2022, 6, 30)),
            TimeRange::days(ymd(2022, 7, 1), ymd(2023, 12, 31)),
            [0.86, 0.07, 0.07],
        )
        .expect("preset is valid")
    }

    /// Hourly preset: training 2020-07-13..=2023-06-30, validation
    /// 2023-07-01..=2023-12-31, test 2024-01-01..=2024-07-11.
    pub fn hourly_default() -> Self {
        Self::new(
            TimeRange::days(ymd(2020, 7, 13), ymd(2023, 6, 30)),
            TimeRange::days(ymd(2023, 7, 1), ymd(2023, 12, 31)),
            TimeRange::days(ymd(2024, 1, 1), ymd(2024, 7, 11)),
            [0.75, 0.125, 0.125],
        )
        .expect("preset is valid")
    }

    /// Derives date boundaries from point counts so the three partitions
    /// hold `round(f·n)` points (test takes the remainder).
    pub fn from_fractions(series: &PriceSeries, fractions: [f64; 3]) -> Result<Self, SeriesError> {
        let n = series.len();
        if n < 3 {
            return Err(SeriesError::InvalidSplit(format!(
                "series of {n} points cannot be split three ways"
            )));
        }
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = (fractions[1] * n as f64).round() as usize;
        let cut1 = n_train.min(n);
        let cut2 = (n_train + n_val).min(n);
        let ts = |i: usize| series.bars[i].timestamp;
        let end = |i: usize| {
            if i < n {
                ts(i)
            } else {
                ts(n - 1) + Duration::seconds(1)
            }
        };
        Self::new(
            TimeRange::new(ts(0), end(cut1)),
            TimeRange::new(end(cut1), end(cut2)),
            TimeRange::new(end(cut2), ts(n - 1) + Duration::seconds(1)),
            fractions,
        )
    }
}

/// The three chronological partitions with index bookkeeping into the
/// parent series.
#[derive(Debug, Clone)]
pub struct SplitSeries {
    pub train: PriceSeries,
    pub validation: PriceSeries,
    pub test: PriceSeries,
    /// Positions of each partition within the parent series.
    pub ranges: [Range<usize>; 3],
    /// Share of covered points falling in each partition.
    pub realised_fractions: [f64; 3],
}

impl SplitSeries {
    pub fn partition(&self, which: Partition) -> &PriceSeries {
        match which {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn range(&self, which: Partition) -> Range<usize> {
        match which {
            Partition::Train => self.ranges[0].clone(),
            Partition::Validation => self.ranges[1].clone(),
            Partition::Test => self.ranges[2].clone(),
        }
    }
}

pub fn split(series: &PriceSeries, spec: &SplitSpec) -> Result<SplitSeries, SeriesError> {
    let locate = |range: &TimeRange| {
        let start = series.bars.partition_point(|b| b.timestamp < range.start);
        let end = series.bars.partition_point(|b| b.timestamp < range.end);
        start..end.max(start)
    };
    let ranges = [locate(&spec.train), locate(&spec.validation), locate(&spec.test)];
    for (r, p) in ranges.iter().zip([Partition::Train, Partition::Validation, Partition::Test]) {
        if r.is_empty() {
            return Err(SeriesError::EmptyPartition(p));
        }
    }
    let covered: usize = ranges.iter().map(|r| r.len()).sum();
    let realised_fractions = [
        ranges[0].len() as f64 / covered as f64,
        ranges[1].len() as f64 / covered as f64,
        ranges[2].len() as f64 / covered as f64,
    ];
    Ok(SplitSeries {
        train: series.slice(ranges[0].clone()),
        validation: series.slice(ranges[1].clone()),
        test: series.slice(ranges[2].clone()),
        ranges,
        realised_fractions,
    })
}

/// Min-max scaler fitted on training closes only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normaliser {
    pub min: f64,
    pub max: f64,
}

impl Normaliser {
    pub fn fit(train: &PriceSeries) -> Result<Self, SeriesError> {
        Self::fit_values(&train.closes())
    }

    pub fn fit_values(values: &[f64]) -> Result<Self, SeriesError> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Err(SeriesError::NoData);
        }
        if !(max > min) {
            return Err(SeriesError::DegenerateRange(min));
        }
        Ok(Self { min, max })
    }

    /// `(x − min)/(max − min)`; values outside the training range map
    /// outside `[0, 1]` and are not clipped.
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn inverse_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.inverse(y)).collect()
    }
}

/// Fixed-length input windows with their next-step targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// Row-major `len() × window_length`.
    inputs: Vec<f64>,
    targets: Vec<f64>,
    window_length: usize,
    source_indices: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.window_length..(i + 1) * self.window_length]
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks(self.window_length)
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Position of each target in the parent series.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Shifts `source_indices` so they refer to a larger parent series in
    /// which this data starts at `offset`.
    pub fn with_offset(mut self, offset: usize) -> Self {
        self.source_indices.iter_mut().for_each(|i| *i += offset);
        self
    }

    /// Copies the windows listed in `rows` into one contiguous buffer
    /// (`rows.len() × window_length`) plus their targets.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(rows.len() * self.window_length);
        let mut targets = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(self.input(r));
            targets.push(self.targets[r]);
        }
        (inputs, targets)
    }
}

/// Window `i` covers positions `[i, i + L)`; its target is position `i + L`.
pub fn make_windows(values: &[f64], window_length: usize) -> Result<WindowedDataset, SeriesError> {
    if window_length == 0 || values.len() <= window_length {
        return Err(SeriesError::InsufficientData {
            len: values.len(),
            window: window_length,
        });
    }
    let n = values.len() - window_length;
    let mut inputs = Vec::with_capacity(n * window_length);
    for i in 0..n {
        inputs.extend_from_slice(&values[i..i + window_length]);
    }
    Ok(WindowedDataset {
        inputs,
        targets: values[window_length..].to_vec(),
        window_length,
        source_indices: (window_length..values.len()).collect(),
    })
}

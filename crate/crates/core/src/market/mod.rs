//! Daily market data: bars, news, amplitudes, indicators and the gated
//! dataset view the agents observe.

mod dataset;
mod indicators;

use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{AssetSeries, AssetSnapshot, Dataset, MarketSnapshot, DEFAULT_INDICATOR_WINDOW, MANIFEST_FILE, NEWS_FILE};
pub use indicators::{default_indicator_set, indicators, Indicator, IndicatorMap, SUPPORTED_INDICATORS};

pub const OHLCV_HEADER: [&str; 7] = ["date", "open", "high", "low", "close", "adj_close", "volume"];
pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header must be `{expected}`, found `{found}`")]
    Header { path: PathBuf, expected: String, found: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{symbol} {date}: {reason}")]
    Invalid { symbol: String, date: NaiveDate, reason: String },
    #[error("{symbol}: duplicate bar for {date}")]
    Duplicate { symbol: String, date: NaiveDate },
    #[error("insufficient history: need {needed} bars, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("unknown indicator `{name}`; supported: {}", SUPPORTED_INDICATORS.join(", "))]
    UnknownIndicator { name: String },
    #[error("date {date} precedes the first bar ({first})")]
    BeforeFirstBar { date: NaiveDate, first: NaiveDate },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Manifest(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetClass {
    Crypto,
    Equity,
    Forex,
}

impl AssetClass {
    pub const ALL: [AssetClass; 3] = [AssetClass::Crypto, AssetClass::Equity, AssetClass::Forex];

    pub fn index(self) -> usize {
        match self {
            AssetClass::Crypto => 0,
            AssetClass::Equity => 1,
            AssetClass::Forex => 2,
        }
    }
}

impl fmt::Display for AssetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssetClass::Crypto => "crypto",
            AssetClass::Equity => "equity",
            AssetClass::Forex => "forex",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssetId {
    pub symbol: String,
    pub asset_class: AssetClass,
}

impl AssetId {
    pub fn new(symbol: impl Into<String>, asset_class: AssetClass) -> Result<Self> {
        let symbol = symbol.into();
        if symbol.trim().is_empty() {
            return Err(DataError::Manifest("asset symbol must be non-empty".into()));
        }
        Ok(Self { symbol, asset_class })
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol)
    }
}

/// One daily OHLCV observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl Bar {
    /// Checks positivity and the OHLC ordering; returns the first violation.
    pub fn check(&self) -> Option<String> {
        let prices = [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
            ("adj_close", self.adj_close),
        ];
        for (name, v) in prices {
            if !v.is_finite() || v <= 0.0 {
                return Some(format!("{name} must be a positive number, got {v}"));
            }
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Some(format!("volume must be non-negative, got {}", self.volume));
        }
        if self.low > self.high {
            return Some(format!("low {} above high {}", self.low, self.high));
        }
        if self.high < self.open.max(self.close) {
            return Some(format!("high {} below max(open, close)", self.high));
        }
        if self.low > self.open.min(self.close) {
            return Some(format!("low {} above min(open, close)", self.low));
        }
        None
    }

    /// Price used for returns, valuation and execution: adjusted close for
    /// equities, close otherwise.
    pub fn valuation_price(&self, class: AssetClass) -> f64 {
        match class {
            AssetClass::Equity => self.adj_close,
            _ => self.close,
        }
    }

    /// Opening price on the valuation scale (open × adj_close / close).
    pub fn valuation_open(&self, class: AssetClass) -> f64 {
        match class {
            AssetClass::Equity => self.open * self.adj_close / self.close,
            _ => self.open,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsItem {
    pub date: NaiveDate,
    pub asset: AssetId,
    pub headline: String,
}

/// A row that failed validation while scanning a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: u64,
    pub date: Option<NaiveDate>,
    pub reason: String,
}

/// Result of a tolerant scan: every valid bar plus every violation found.
#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub bars: Vec<Bar>,
    pub violations: Vec<Violation>,
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).map_err(|e| format!("bad date `{s}`: {e}"))
}

fn parse_num(field: &str, s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("bad {field} `{s}`"))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| DataError::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?
        .clone();
    let found: Vec<&str> = header.iter().collect();
    if found != OHLCV_HEADER {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected: OHLCV_HEADER.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

/// Reads an OHLCV CSV, collecting malformed rows and invariant violations
/// instead of stopping at the first one. Valid bars come back sorted.
/// Header and I/O problems are still hard errors.
pub fn scan_ohlcv(path: &Path) -> Result<ScanReport> {
    let mut rdr = open_csv(path)?;
    let mut report = ScanReport::default();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.violations.push(Violation { line, date: None, reason: e.to_string() });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parsed = (|| -> std::result::Result<Bar, (Option<NaiveDate>, String)> {
            if rec.len() != 7 {
                return Err((None, format!("expected 7 fields, found {}", rec.len())));
            }
            let date = parse_date(&rec[0]).map_err(|m| (None, m))?;
            let num = |i: usize| parse_num(OHLCV_HEADER[i], &rec[i]).map_err(|m| (Some(date), m));
            Ok(Bar {
                date,
                open: num(1)?,
                high: num(2)?,
                low: num(3)?,
                close: num(4)?,
                adj_close: num(5)?,
                volume: num(6)?,
            })
        })();
        match parsed {
            Ok(bar) => match bar.check() {
                None => report.bars.push(bar),
                Some(reason) => report.violations.push(Violation { line, date: Some(bar.date), reason }),
            },
            Err((date, reason)) => report.violations.push(Violation { line, date, reason }),
        }
    }
    report.bars.sort_by_key(|b| b.date);
    let mut dupes = Vec::new();
    for w in report.bars.windows(2) {
        if w[0].date == w[1].date {
            dupes.push(w[1].date);
        }
    }
    for d in dupes {
        report.violations.push(Violation { line: 0, date: Some(d), reason: "duplicate date".into() });
    }
    report.bars.dedup_by_key(|b| b.date);
    Ok(report)
}

/// Strict loader: the first malformed row or invariant violation is an error.
pub fn load_ohlcv(path: &Path, asset: &AssetId) -> Result<Vec<Bar>> {
    let mut rdr = open_csv(path)?;
    let mut bars = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let perr = |message: String| DataError::Parse { path: path.to_path_buf(), line, message };
        if rec.len() != 7 {
            return Err(perr(format!("expected 7 fields, found {}", rec.len())));
        }
        let date = parse_date(&rec[0]).map_err(perr)?;
        let num = |i: usize| parse_num(OHLCV_HEADER[i], &rec[i]).map_err(perr);
        let bar = Bar {
            date,
            open: num(1)?,
            high: num(2)?,
            low: num(3)?,
            close: num(4)?,
            adj_close: num(5)?,
            volume: num(6)?,
        };
        if let Some(reason) = bar.check() {
            return Err(DataError::Invalid { symbol: asset.symbol.clone(), date, reason });
        }
        bars.push(bar);
    }
    bars.sort_by_key(|b| b.date);
    if let Some(w) = bars.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(DataError::Duplicate { symbol: asset.symbol.clone(), date: w[0].date });
    }
    Ok(bars)
}

#[derive(Deserialize)]
struct RawNews {
    date: String,
    symbol: String,
    headline: String,
}

/// Reads a news JSONL file. `resolve` maps a symbol to its asset; items for
/// unknown symbols and blank headlines are skipped.
pub fn load_news(path: &Path, resolve: impl Fn(&str) -> Option<AssetId>) -> Result<Vec<NewsItem>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| DataError::Parse { path: path.to_path_buf(), line: i as u64 + 1, message };
        let raw: RawNews = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let date = parse_date(&raw.date).map_err(perr)?;
        if raw.headline.trim().is_empty() {
            log::warn!("{}:{}: empty headline skipped", path.display(), i + 1);
            continue;
        }
        match resolve(&raw.symbol) {
            Some(asset) => out.push(NewsItem { date, asset, headline: raw.headline }),
            None => log::warn!("{}:{}: unknown symbol `{}` skipped", path.display(), i + 1, raw.symbol),
        }
    }
    out.sort_by_key(|n| n.date);
    Ok(out)
}

/// How the intraday amplitude is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeMode {
    /// (high − low) / previous close.
    #[default]
    IntradayRange,
    /// |close / previous close − 1|.
    CloseToClose,
}

/// Daily amplitude of the last bar in the window, `(high − low) / prev close`.
pub fn daily_amplitude(bars: &[Bar]) -> Result<f64> {
    daily_amplitude_with(bars, AmplitudeMode::IntradayRange)
}

pub fn daily_amplitude_with(bars: &[Bar], mode: AmplitudeMode) -> Result<f64> {
    let n = bars.len();
    if n < 2 {
        return Err(DataError::InsufficientHistory { needed: 2, available: n });
    }
    let (prev, cur) = (&bars[n - 2], &bars[n - 1]);
    Ok(match mode {
        AmplitudeMode::IntradayRange => (cur.high - cur.low) / prev.close,
        AmplitudeMode::CloseToClose => (cur.close / prev.close - 1.0).abs(),
    })
}

/// Absolute close-to-close change over the last three sessions.
pub fn cumulative_amplitude_3d(bars: &[Bar]) -> Result<f64> {
    let n = bars.len();
    if n < 4 {
        return Err(DataError::InsufficientHistory { needed: 4, available: n });
    }
    Ok((bars[n - 1].close / bars[n - 4].close - 1.0).abs())
}

/// Simple daily returns of one asset on its own calendar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub asset: AssetId,
    /// Date of each return (the later of the two bars).
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
}

impl ReturnSeries {
    pub fn from_bars(asset: &AssetId, bars: &[Bar]) -> Self {
        let px: Vec<f64> = bars.iter().map(|b| b.valuation_price(asset.asset_class)).collect();
        let returns = px.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        let dates = bars.iter().skip(1).map(|b| b.date).collect();
        Self { asset: asset.clone(), dates, returns }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn bar(date: &str, o: f64, h: f64, l: f64, c: f64) -> Bar {
        Bar {
            date: NaiveDate::parse_from_str(date, DATE_FORMAT).unwrap(),
            open: o,
            high: h,
            low: l,
            close: c,
            adj_close: c,
            volume: 1000.0,
        }
    }

    fn closes(cs: &[f64]) -> Vec<Bar> {
        let d0 = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        cs.iter()
            .enumerate()
            .map(|(i, &c)| Bar {
                date: d0 + chrono::Days::new(i as u64),
                open: c,
                high: c,
                low: c,
                close: c,
                adj_close: c,
                volume: 0.0,
            })
            .collect()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,open,high,low,close,adj_close,volume").unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn btc() -> AssetId {
        AssetId::new("BTC", AssetClass::Crypto).unwrap()
    }

    #[test]
    fn loads_direct_field_mapping() {
        let f = write_csv("2021-01-04,100,110,95,105,105,1000\n");
        let bars = load_ohlcv(f.path(), &btc()).unwrap();
        assert_eq!(bars.len(), 1);
        let b = bars[0];
        assert_eq!((b.open, b.high, b.low, b.close, b.volume), (100.0, 110.0, 95.0, 105.0, 1000.0));
    }

    #[test]
    fn high_below_open_names_the_date() {
        let f = write_csv("2021-01-04,100,90,80,85,85,10\n");
        match load_ohlcv(f.path(), &btc()) {
            Err(DataError::Invalid { date, .. }) => assert_eq!(date.to_string(), "2021-01-04"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write_csv("2021-01-04,100,110,95,105,105,1000\n2021-01-05,abc,1,1,1,1,1\n");
        match load_ohlcv(f.path(), &btc()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_rows_are_sorted() {
        let rows = [
            "2021-01-06,3,3,3,3,3,1",
            "2021-01-04,1,1,1,1,1,1",
            "2021-01-05,2,2,2,2,2,1",
        ];
        let f = write_csv(&(rows.join("\n") + "\n"));
        let bars = load_ohlcv(f.path(), &btc()).unwrap();
        let mut expected: Vec<&str> = rows.iter().map(|r| &r[..10]).collect();
        expected.sort();
        let got: Vec<String> = bars.iter().map(|b| b.date.to_string()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn duplicate_dates_rejected() {
        let f = write_csv("2021-01-04,1,1,1,1,1,1\n2021-01-04,2,2,2,2,2,1\n");
        assert!(matches!(load_ohlcv(f.path(), &btc()), Err(DataError::Duplicate { .. })));
    }

    #[test]
    fn wrong_header_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,open,high,low,close,volume").unwrap();
        assert!(matches!(load_ohlcv(f.path(), &btc()), Err(DataError::Header { .. })));
    }

    #[test]
    fn scan_collects_all_violations() {
        let f = write_csv("2021-01-04,100,90,80,85,85,10\n2021-01-05,1,1,1,1,1,1\n2021-01-06,1,1,2,1,1,1\n");
        let r = scan_ohlcv(f.path()).unwrap();
        assert_eq!(r.bars.len(), 1);
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn loader_is_idempotent() {
        let f = write_csv("2021-01-05,2,2,2,2,2,1\n2021-01-04,1,1,1,1,1,1\n");
        assert_eq!(load_ohlcv(f.path(), &btc()).unwrap(), load_ohlcv(f.path(), &btc()).unwrap());
    }

    #[test]
    fn daily_amplitude_cases() {
        let b = [bar("2021-01-01", 100.0, 100.0, 100.0, 100.0), bar("2021-01-02", 100.0, 104.0, 98.0, 100.0)];
        let a = daily_amplitude(&b).unwrap();
        assert!((a - 0.06).abs() < 1e-12 && a > 0.05);

        let flat = [bar("2021-01-01", 1.0, 1.0, 1.0, 1.0), bar("2021-01-02", 2.0, 2.0, 2.0, 2.0)];
        assert_eq!(daily_amplitude(&flat).unwrap(), 0.0);

        let b = [bar("2021-01-01", 200.0, 200.0, 200.0, 200.0), bar("2021-01-02", 206.0, 210.0, 205.0, 207.0)];
        assert!((daily_amplitude(&b).unwrap() - (210.0 - 205.0) / 200.0).abs() < 1e-15);

        assert!(matches!(daily_amplitude(&b[..1]), Err(DataError::InsufficientHistory { .. })));
    }

    #[test]
    fn close_to_close_mode() {
        let b = closes(&[100.0, 97.0]);
        assert!((daily_amplitude_with(&b, AmplitudeMode::CloseToClose).unwrap() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn three_day_amplitude_cases() {
        let a = cumulative_amplitude_3d(&closes(&[100.0, 97.0, 93.0, 89.78])).unwrap();
        assert!((a - 0.1022).abs() < 1e-12);
        assert_eq!(cumulative_amplitude_3d(&closes(&[5.0; 4])).unwrap(), 0.0);
        let a = cumulative_amplitude_3d(&closes(&[100.0, 105.0, 103.0, 109.0])).unwrap();
        assert!((a - (109.0f64 / 100.0 - 1.0).abs()).abs() < 1e-15);
        assert!(cumulative_amplitude_3d(&closes(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn return_series_shape() {
        let bars = closes(&[100.0, 110.0, 99.0]);
        let rs = ReturnSeries::from_bars(&btc(), &bars);
        assert_eq!(rs.len(), 2);
        assert_eq!(rs.dates[0], bars[1].date);
        assert!((rs.returns[0] - 0.1).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn price_path() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-0.2f64..0.2, 1..80).prop_map(|rs| {
                let mut p = 100.0;
                let mut out = vec![p];
                for r in rs {
                    p *= 1.0 + r;
                    out.push(p);
                }
                out
            })
        }

        proptest! {
            #[test]
            fn returns_recompose_to_price_ratio(px in price_path()) {
                let bars = closes(&px);
                let rs = ReturnSeries::from_bars(&btc(), &bars);
                let prod: f64 = rs.returns.iter().map(|r| 1.0 + r).product();
                let ratio = px[px.len() - 1] / px[0];
                prop_assert!((prod - ratio).abs() <= 1e-12 * ratio.max(1.0));
            }

            #[test]
            fn amplitudes_are_scale_invariant(px in price_path(), c in 0.01f64..100.0) {
                prop_assume!(px.len() >= 4);
                let mut bars = closes(&px);
                for b in bars.iter_mut() {
                    b.high *= 1.02;
                    b.low *= 0.99;
                }
                let scaled: Vec<Bar> = bars.iter().map(|b| Bar {
                    open: b.open * c, high: b.high * c, low: b.low * c,
                    close: b.close * c, adj_close: b.adj_close * c, ..*b
                }).collect();
                let d1 = daily_amplitude(&bars).unwrap();
                let d2 = daily_amplitude(&scaled).unwrap();
                prop_assert!((d1 - d2).abs() <= 1e-12 * d1.abs().max(1.0));
                let t1 = cumulative_amplitude_3d(&bars).unwrap();
                let t2 = cumulative_amplitude_3d(&scaled).unwrap();
                prop_assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1.0));
            }
        }
    }
}

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::indicators::{default_indicator_set, Indicator, IndicatorMap};
use super::{load_news, load_ohlcv, AssetClass, AssetId, Bar, DataError, NewsItem, Result};

/// Trailing bars handed to the indicator set for each snapshot.
pub const DEFAULT_INDICATOR_WINDOW: usize = 260;

pub const MANIFEST_FILE: &str = "assets.json";
pub const NEWS_FILE: &str = "news.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSeries {
    pub asset: AssetId,
    pub bars: Vec<Bar>,
    pub news: Vec<NewsItem>,
}

/// Everything observable for one asset on one date.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetSnapshot {
    pub asset: AssetId,
    pub bar: Bar,
    /// Only indicators whose lookback is satisfied appear here.
    pub indicators: IndicatorMap,
    pub news: Vec<NewsItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketSnapshot {
    pub date: NaiveDate,
    /// Assets with a bar on `date`, in dataset order.
    pub assets: Vec<AssetSnapshot>,
}

impl MarketSnapshot {
    pub fn get(&self, symbol: &str) -> Option<&AssetSnapshot> {
        self.assets.iter().find(|a| a.asset.symbol == symbol)
    }
}

/// Read-only multi-asset history with a union trading calendar.
#[derive(Debug, Clone)]
pub struct Dataset {
    series: Vec<AssetSeries>,
    calendar: Vec<NaiveDate>,
    indicator_set: Vec<Indicator>,
    indicator_window: usize,
}

impl Dataset {
    pub fn new(mut series: Vec<AssetSeries>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &mut series {
            if !seen.insert(s.asset.symbol.clone()) {
                return Err(DataError::Manifest(format!("duplicate symbol `{}`", s.asset.symbol)));
            }
            s.bars.sort_by_key(|b| b.date);
            if let Some(w) = s.bars.windows(2).find(|w| w[0].date == w[1].date) {
                return Err(DataError::Duplicate { symbol: s.asset.symbol.clone(), date: w[0].date });
            }
            if let Some(b) = s.bars.iter().find(|b| b.check().is_some()) {
                return Err(DataError::Invalid {
                    symbol: s.asset.symbol.clone(),
                    date: b.date,
                    reason: b.check().unwrap(),
                });
            }
            s.news.sort_by_key(|n| n.date);
        }
        let calendar: BTreeSet<NaiveDate> = series.iter().flat_map(|s| s.bars.iter().map(|b| b.date)).collect();
        if calendar.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            series,
            calendar: calendar.into_iter().collect(),
            indicator_set: default_indicator_set(),
            indicator_window: DEFAULT_INDICATOR_WINDOW,
        })
    }

    /// Loads `assets.json` (array of `{symbol, asset_class}`), one
    /// `<SYMBOL>.csv` per asset and an optional `news.jsonl`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            symbol: String,
            asset_class: AssetClass,
        }
        let manifest = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).map_err(|source| DataError::Io { path: manifest.clone(), source })?;
        let entries: Vec<Entry> = serde_json::from_str(&text)
            .map_err(|e| DataError::Manifest(format!("{}: {e}", manifest.display())))?;
        let mut series = Vec::with_capacity(entries.len());
        for e in entries {
            let asset = AssetId::new(e.symbol, e.asset_class)?;
            let bars = load_ohlcv(&dir.join(format!("{}.csv", asset.symbol)), &asset)?;
            series.push(AssetSeries { asset, bars, news: Vec::new() });
        }
        let news_path = dir.join(NEWS_FILE);
        if news_path.exists() {
            let assets: Vec<AssetId> = series.iter().map(|s| s.asset.clone()).collect();
            let news = load_news(&news_path, |sym| assets.iter().find(|a| a.symbol == sym).cloned())?;
            for item in news {
                let s = series.iter_mut().find(|s| s.asset == item.asset).expect("resolved symbol");
                s.news.push(item);
            }
        }
        Self::new(series)
    }

    pub fn with_indicators(mut self, set: Vec<Indicator>, window: usize) -> Self {
        self.indicator_set = set;
        self.indicator_window = window;
        self
    }

    pub fn series(&self) -> &[AssetSeries] {
        &self.series
    }

    pub fn assets(&self) -> impl Iterator<Item = &AssetId> {
        self.series.iter().map(|s| &s.asset)
    }

    pub fn asset_index(&self, symbol: &str) -> Option<usize> {
        self.series.iter().position(|s| s.asset.symbol == symbol)
    }

    /// Union of every asset's trading dates.
    pub fn calendar(&self) -> &[NaiveDate] {
        &self.calendar
    }

    pub fn first_date(&self) -> NaiveDate {
        self.calendar[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        *self.calendar.last().unwrap()
    }

    /// Latest union-calendar date not after `date`.
    pub fn trading_day_on_or_before(&self, date: NaiveDate) -> Option<NaiveDate> {
        let i = self.calendar.partition_point(|d| *d <= date);
        (i > 0).then(|| self.calendar[i - 1])
    }

    /// Earliest union-calendar date not before `date`.
    pub fn trading_day_on_or_after(&self, date: NaiveDate) -> Option<NaiveDate> {
        let i = self.calendar.partition_point(|d| *d < date);
        self.calendar.get(i).copied()
    }

    /// Bars of asset `idx` dated on or before `date`.
    pub fn bars_upto(&self, idx: usize, date: NaiveDate) -> &[Bar] {
        let bars = &self.series[idx].bars;
        &bars[..bars.partition_point(|b| b.date <= date)]
    }

    pub fn bar_on(&self, idx: usize, date: NaiveDate) -> Option<&Bar> {
        let bars = self.bars_upto(idx, date);
        bars.last().filter(|b| b.date == date)
    }

    /// Most recent bar on or before `date` (carry-forward valuation).
    pub fn last_bar(&self, idx: usize, date: NaiveDate) -> Option<&Bar> {
        self.bars_upto(idx, date).last()
    }

    pub fn news_upto(&self, idx: usize, date: NaiveDate) -> &[NewsItem] {
        let news = &self.series[idx].news;
        &news[..news.partition_point(|n| n.date <= date)]
    }

    /// Indicators for asset `idx` from the trailing window ending at `date`.
    pub fn indicators_at(&self, idx: usize, date: NaiveDate) -> IndicatorMap {
        let bars = self.bars_upto(idx, date);
        let window = &bars[bars.len().saturating_sub(self.indicator_window)..];
        let mut out = IndicatorMap::new();
        for ind in &self.indicator_set {
            if let Ok(values) = ind.compute(window) {
                out.extend(values);
            }
        }
        out
    }

    /// Gated view of the market as of `date`; non-trading dates resolve to
    /// the most recent prior trading day.
    pub fn snapshot(&self, date: NaiveDate) -> Result<MarketSnapshot> {
        let day = self
            .trading_day_on_or_before(date)
            .ok_or(DataError::BeforeFirstBar { date, first: self.first_date() })?;
        let mut assets = Vec::new();
        for (idx, s) in self.series.iter().enumerate() {
            let Some(bar) = self.bar_on(idx, day) else { continue };
            let news = self.news_upto(idx, day);
            let todays = &news[news.partition_point(|n| n.date < day)..];
            assets.push(AssetSnapshot {
                asset: s.asset.clone(),
                bar: *bar,
                indicators: self.indicators_at(idx, day),
                news: todays.to_vec(),
            });
        }
        Ok(MarketSnapshot { date: day, assets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn mk_bars(start: &str, n: usize, step: u64) -> Vec<Bar> {
        (0..n)
            .map(|i| {
                let c = 100.0 + i as f64;
                Bar {
                    date: d(start) + chrono::Days::new(i as u64 * step),
                    open: c,
                    high: c + 1.0,
                    low: c - 1.0,
                    close: c,
                    adj_close: c,
                    volume: 10.0,
                }
            })
            .collect()
    }

    fn fixture() -> Dataset {
        let btc = AssetId::new("BTC", AssetClass::Crypto).unwrap();
        let eq = AssetId::new("DJI", AssetClass::Equity).unwrap();
        let news = vec![
            NewsItem { date: d("2021-01-05"), asset: btc.clone(), headline: "today".into() },
            NewsItem { date: d("2021-01-06"), asset: btc.clone(), headline: "FUTURE".into() },
        ];
        Dataset::new(vec![
            AssetSeries { asset: btc, bars: mk_bars("2021-01-01", 10, 1), news },
            AssetSeries { asset: eq, bars: mk_bars("2021-01-01", 5, 2), news: vec![] },
        ])
        .unwrap()
    }

    #[test]
    fn snapshot_excludes_future() {
        let ds = fixture();
        let snap = ds.snapshot(d("2021-01-05")).unwrap();
        assert_eq!(snap.date, d("2021-01-05"));
        for a in &snap.assets {
            assert!(a.bar.date <= snap.date);
            assert!(a.news.iter().all(|n| n.date <= snap.date));
        }
        let btc = snap.get("BTC").unwrap();
        assert_eq!(btc.news.len(), 1);
        assert_eq!(btc.news[0].headline, "today");
        // DJI trades every other day: 01, 03, 05
        assert!(snap.get("DJI").is_some());
        assert!(ds.snapshot(d("2021-01-04")).unwrap().get("DJI").is_none());
    }

    #[test]
    fn first_date_has_no_long_indicators() {
        let ds = fixture();
        let snap = ds.snapshot(d("2021-01-01")).unwrap();
        let btc = snap.get("BTC").unwrap();
        assert!(!btc.indicators.contains_key("SMA(20)"));
        assert!(btc.indicators.is_empty());
    }

    #[test]
    fn non_trading_date_resolves_to_prior_day() {
        let btc = AssetId::new("BTC", AssetClass::Crypto).unwrap();
        let ds = Dataset::new(vec![AssetSeries { asset: btc, bars: mk_bars("2021-01-01", 5, 3), news: vec![] }]).unwrap();
        let cal = ds.calendar().to_vec();
        for probe in 0..15u64 {
            let q = d("2021-01-01") + chrono::Days::new(probe);
            let expect = cal.iter().rev().find(|c| **c <= q).copied().unwrap();
            assert_eq!(ds.snapshot(q).unwrap().date, expect);
        }
    }

    #[test]
    fn before_first_bar_is_error() {
        let ds = fixture();
        assert!(matches!(ds.snapshot(d("2020-12-31")), Err(DataError::BeforeFirstBar { .. })));
    }

    #[test]
    fn union_calendar() {
        let ds = fixture();
        assert_eq!(ds.calendar().len(), 10);
        assert_eq!(ds.trading_day_on_or_after(d("2020-06-01")), Some(d("2021-01-01")));
    }

    #[test]
    fn duplicate_symbols_rejected() {
        let btc = AssetId::new("BTC", AssetClass::Crypto).unwrap();
        let s = AssetSeries { asset: btc, bars: mk_bars("2021-01-01", 3, 1), news: vec![] };
        assert!(Dataset::new(vec![s.clone(), s]).is_err());
    }
}

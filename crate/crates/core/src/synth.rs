//! Seeded synthetic market data: trending and mean-reverting price paths,
//! planted extreme moves, filler news, and a writer for the on-disk layout
//! read by [`Dataset::load_dir`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conferences::TriggerKind;
use crate::market::{AssetClass, AssetId, AssetSeries, Bar, NewsItem, MANIFEST_FILE, NEWS_FILE};
use crate::market::{Dataset, DataError};

/// Log-price dynamics of a synthetic asset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Process {
    /// Geometric random walk with daily drift and volatility.
    Trend { drift: f64, vol: f64 },
    /// Ornstein–Uhlenbeck in log price around `ln(level)`.
    MeanRevert { kappa: f64, level: f64, vol: f64 },
}

/// Equity adjusted closes sit at this fraction of the raw close.
pub const ADJ_FACTOR: f64 = 0.98;

fn trades_on(class: AssetClass, date: NaiveDate) -> bool {
    class == AssetClass::Crypto || !matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Daily bars from `start` to `end` inclusive on the class calendar
/// (crypto every day, others on weekdays).
pub fn bars(
    rng: &mut ChaCha8Rng,
    class: AssetClass,
    start: NaiveDate,
    end: NaiveDate,
    initial: f64,
    process: Process,
) -> Vec<Bar> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    let mut x = initial.ln();
    let mut date = start;
    while date <= end {
        if trades_on(class, date) {
            let prev = x.exp();
            x += match process {
                Process::Trend { drift, vol } => drift + vol * noise.sample(rng),
                Process::MeanRevert { kappa, level, vol } => kappa * (level.ln() - x) + vol * noise.sample(rng),
            };
            let close = x.exp();
            let open = prev;
            let wick = rng.random_range(0.0..0.004);
            let high = open.max(close) * (1.0 + wick);
            let low = open.min(close) * (1.0 - wick);
            let adj = if class == AssetClass::Equity { close * ADJ_FACTOR } else { close };
            let volume = rng.random_range(1.0e5..1.0e6_f64).round();
            out.push(Bar { date, open, high, low, close, adj_close: adj, volume });
        }
        date = date + Days::new(1);
    }
    out
}

pub const FIXTURE_SYMBOLS: [(&str, AssetClass); 3] =
    [("BTC", AssetClass::Crypto), ("AAPL", AssetClass::Equity), ("EURUSD", AssetClass::Forex)];

const HEADLINES: [&str; 6] = [
    "{s} trading volume picks up ahead of the weekly close",
    "Analysts split on near-term outlook for {s}",
    "{s} holds steady as macro calendar stays quiet",
    "Fund flows into {s} products tick higher",
    "Volatility in {s} eases after busy session",
    "Desk notes flag positioning shift in {s}",
];

/// One headline per asset every `every` trading days.
pub fn filler_news(rng: &mut ChaCha8Rng, asset: &AssetId, bars: &[Bar], every: usize) -> Vec<NewsItem> {
    bars.iter()
        .step_by(every.max(1))
        .map(|b| NewsItem {
            date: b.date,
            asset: asset.clone(),
            headline: HEADLINES[rng.random_range(0..HEADLINES.len())].replace("{s}", &asset.symbol),
        })
        .collect()
}

/// Three assets (one per class) between `start` and `end`, every asset
/// following the same kind of process with class-scaled volatility.
pub fn three_asset_series(seed: u64, start: NaiveDate, end: NaiveDate, mean_reverting: bool) -> Vec<AssetSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = [(30_000.0, 0.030), (150.0, 0.015), (1.2, 0.005)];
    FIXTURE_SYMBOLS
        .iter()
        .zip(params)
        .map(|(&(sym, class), (level, vol))| {
            let process = if mean_reverting {
                Process::MeanRevert { kappa: 0.25, level, vol }
            } else {
                Process::Trend { drift: vol / 8.0, vol }
            };
            let asset = AssetId::new(sym, class).expect("fixture symbol");
            let bars = bars(&mut rng, class, start, end, level, process);
            let news = filler_news(&mut rng, &asset, &bars, 5);
            AssetSeries { asset, bars, news }
        })
        .collect()
}

/// Calm single-asset walk with `events` planted threshold breaches,
/// alternating a 7% intraday range and an ~11.8% three-day move. Returns
/// the dataset and the planted `(date, kind)` set.
pub fn planted_extremes(seed: u64, n: usize, events: usize) -> (Dataset, BTreeSet<(NaiveDate, TriggerKind)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let mut closes = vec![100.0];
    let mut ranges = vec![0.01];
    for _ in 1..n {
        closes.push(closes.last().unwrap() * (1.0 + rng.random_range(-0.002..0.002)));
        ranges.push(rng.random_range(0.005..0.02));
    }
    let mut planted = BTreeSet::new();
    let slots: Vec<usize> = (0..events).map(|i| 20 + i * ((n - 40) / events.max(1))).collect();
    for (i, &t) in slots.iter().enumerate() {
        if i % 2 == 0 {
            ranges[t] = 0.07;
            planted.insert((t0 + Days::new(t as u64), TriggerKind::Daily));
        } else {
            // Three steps of 3.8%: 1.038^3 − 1 ≈ 11.8% while each day stays calm.
            let sign = if i % 4 == 1 { 1.0 } else { -1.0 };
            for k in 0..3 {
                closes[t - 2 + k] = closes[t - 3 + k] * (1.0 + sign * 0.038);
            }
            for later in t + 1..n {
                closes[later] = closes[later - 1] * (1.0 + rng.random_range(-0.002..0.002));
            }
            planted.insert((t0 + Days::new(t as u64), TriggerKind::ThreeDay));
        }
    }
    let bars: Vec<Bar> = (0..n)
        .map(|i| {
            let c = closes[i];
            let prev = if i == 0 { c } else { closes[i - 1] };
            let half = ranges[i] * prev / 2.0;
            Bar { date: t0 + Days::new(i as u64), open: c, high: c + half, low: c - half, close: c, adj_close: c, volume: 1.0 }
        })
        .collect();
    let asset = AssetId::new("BTC", AssetClass::Crypto).expect("valid symbol");
    (Dataset::new(vec![AssetSeries { asset, bars, news: vec![] }]).expect("valid bars"), planted)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes `assets.json`, one CSV per asset and `news.jsonl` into `dir`.
pub fn write_dir(dir: &Path, series: &[AssetSeries]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest: Vec<serde_json::Value> = series
        .iter()
        .map(|s| serde_json::json!({"symbol": s.asset.symbol, "asset_class": s.asset.asset_class}))
        .collect();
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest") + "\n").map_err(io(&p))?;
    let mut news: Vec<&NewsItem> = Vec::new();
    for s in series {
        let mut csv = String::from("date,open,high,low,close,adj_close,volume\n");
        for b in &s.bars {
            let _ = writeln!(csv, "{},{},{},{},{},{},{}", b.date, b.open, b.high, b.low, b.close, b.adj_close, b.volume);
        }
        let p = dir.join(format!("{}.csv", s.asset.symbol));
        std::fs::write(&p, csv).map_err(io(&p))?;
        news.extend(&s.news);
    }
    news.sort_by(|a, b| (a.date, &a.asset.symbol).cmp(&(b.date, &b.asset.symbol)));
    let mut lines = String::new();
    for n in news {
        let row = serde_json::json!({"date": n.date, "symbol": n.asset.symbol, "headline": n.headline});
        let _ = writeln!(lines, "{row}");
    }
    let p = dir.join(NEWS_FILE);
    std::fs::write(&p, lines).map_err(io(&p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn bars_are_valid_and_seeded() {
        let a = three_asset_series(3, d("2020-01-01"), d("2020-03-01"), false);
        let b = three_asset_series(3, d("2020-01-01"), d("2020-03-01"), false);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.bars.iter().all(|b| b.check().is_none()));
        }
        assert_eq!(a[0].bars.len(), 61);
        assert!(a[1].bars.iter().all(|b| b.date.weekday().number_from_monday() <= 5));
        assert!((a[1].bars[0].adj_close / a[1].bars[0].close - ADJ_FACTOR).abs() < 1e-12);
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = three_asset_series(5, d("2020-01-01"), d("2020-02-01"), true);
        write_dir(dir.path(), &s).unwrap();
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.series(), &s[..]);
    }

    #[test]
    fn mean_reversion_stays_near_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Process::MeanRevert { kappa: 0.25, level: 100.0, vol: 0.01 };
        let b = bars(&mut rng, AssetClass::Crypto, d("2020-01-01"), d("2021-12-31"), 100.0, p);
        assert!(b.iter().all(|b| (b.close / 100.0).ln().abs() < 0.15));
    }
}

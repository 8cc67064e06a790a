//! Technical indicators over a trailing bar window.
//!
//! Every indicator reads only the bars it is handed; the dataset decides
//! which window that is. EMA-style indicators seed with the simple mean of
//! their first `n` inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{Bar, DataError, Result};

pub type IndicatorMap = BTreeMap<String, f64>;

pub const SUPPORTED_INDICATORS: [&str; 10] = [
    "SMA(n)",
    "EMA(n)",
    "RSI(n)",
    "MACD(fast,slow,signal)",
    "ATR(n)",
    "BB(n,k)",
    "MOM(n)",
    "ROC(n)",
    "VOL(n)",
    "OBV",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Indicator {
    Sma(usize),
    Ema(usize),
    Rsi(usize),
    Macd { fast: usize, slow: usize, signal: usize },
    Atr(usize),
    Bollinger { period: usize, width: f64 },
    Momentum(usize),
    RateOfChange(usize),
    Volatility(usize),
    Obv,
}

pub fn default_indicator_set() -> Vec<Indicator> {
    vec![
        Indicator::Sma(20),
        Indicator::Ema(20),
        Indicator::Rsi(14),
        Indicator::Macd { fast: 12, slow: 26, signal: 9 },
        Indicator::Atr(14),
        Indicator::Bollinger { period: 20, width: 2.0 },
        Indicator::Momentum(10),
        Indicator::RateOfChange(252),
        Indicator::Volatility(20),
        Indicator::Obv,
    ]
}

impl Indicator {
    /// Minimum number of bars needed to produce a value.
    pub fn lookback(&self) -> usize {
        match *self {
            Indicator::Sma(n) | Indicator::Ema(n) | Indicator::Bollinger { period: n, .. } => n,
            Indicator::Rsi(n)
            | Indicator::Atr(n)
            | Indicator::Momentum(n)
            | Indicator::RateOfChange(n)
            | Indicator::Volatility(n) => n + 1,
            Indicator::Macd { slow, signal, .. } => slow + signal - 1,
            Indicator::Obv => 2,
        }
    }

    /// Computes the indicator over `bars` (oldest first). Multi-output
    /// indicators add suffixed keys such as `MACD(12,26,9).signal`.
    pub fn compute(&self, bars: &[Bar]) -> Result<IndicatorMap> {
        let need = self.lookback();
        if bars.len() < need {
            return Err(DataError::InsufficientHistory { needed: need, available: bars.len() });
        }
        let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
        let name = self.to_string();
        let mut out = IndicatorMap::new();
        match *self {
            Indicator::Sma(n) => {
                out.insert(name, mean(&closes[closes.len() - n..]));
            }
            Indicator::Ema(n) => {
                out.insert(name, *ema_series(&closes, n).last().unwrap());
            }
            Indicator::Rsi(n) => {
                out.insert(name, rsi(&closes, n));
            }
            Indicator::Macd { fast, slow, signal } => {
                let f = ema_series(&closes, fast);
                let s = ema_series(&closes, slow);
                // Both series end on the last bar; align from the slow start.
                let line: Vec<f64> = s.iter().zip(&f[f.len() - s.len()..]).map(|(s, f)| f - s).collect();
                let sig = *ema_series(&line, signal).last().unwrap();
                let last = *line.last().unwrap();
                out.insert(format!("{name}.signal"), sig);
                out.insert(format!("{name}.hist"), last - sig);
                out.insert(name, last);
            }
            Indicator::Atr(n) => {
                let tr: Vec<f64> = bars
                    .windows(2)
                    .map(|w| {
                        let (p, c) = (&w[0], &w[1]);
                        (c.high - c.low).max((c.high - p.close).abs()).max((c.low - p.close).abs())
                    })
                    .collect();
                let mut atr = mean(&tr[..n]);
                for &x in &tr[n..] {
                    atr = (atr * (n as f64 - 1.0) + x) / n as f64;
                }
                out.insert(name, atr);
            }
            Indicator::Bollinger { period, width } => {
                let w = &closes[closes.len() - period..];
                let mid = mean(w);
                let sd = (w.iter().map(|x| (x - mid).powi(2)).sum::<f64>() / period as f64).sqrt();
                let last = *closes.last().unwrap();
                out.insert(format!("{name}.upper"), mid + width * sd);
                out.insert(format!("{name}.middle"), mid);
                out.insert(format!("{name}.lower"), mid - width * sd);
                out.insert(format!("{name}.z"), if sd > 0.0 { (last - mid) / sd } else { 0.0 });
            }
            Indicator::Momentum(n) => {
                let k = closes.len();
                out.insert(name, closes[k - 1] - closes[k - 1 - n]);
            }
            Indicator::RateOfChange(n) => {
                let k = closes.len();
                out.insert(name, closes[k - 1] / closes[k - 1 - n] - 1.0);
            }
            Indicator::Volatility(n) => {
                let k = closes.len();
                let r: Vec<f64> = closes[k - 1 - n..].windows(2).map(|w| w[1] / w[0] - 1.0).collect();
                let m = mean(&r);
                let var = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
                out.insert(name, var.sqrt());
            }
            Indicator::Obv => {
                let obv = bars.windows(2).fold(0.0, |acc, w| {
                    if w[1].close > w[0].close {
                        acc + w[1].volume
                    } else if w[1].close < w[0].close {
                        acc - w[1].volume
                    } else {
                        acc
                    }
                });
                out.insert(name, obv);
            }
        }
        Ok(out)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// EMA values from index `n − 1` onward (SMA-seeded).
fn ema_series(xs: &[f64], n: usize) -> Vec<f64> {
    let k = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len() + 1 - n);
    let mut e = mean(&xs[..n]);
    out.push(e);
    for &x in &xs[n..] {
        e += k * (x - e);
        out.push(e);
    }
    out
}

/// Wilder RSI.
fn rsi(closes: &[f64], n: usize) -> f64 {
    let diffs: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    let mut gain = diffs[..n].iter().map(|d| d.max(0.0)).sum::<f64>() / n as f64;
    let mut loss = diffs[..n].iter().map(|d| (-d).max(0.0)).sum::<f64>() / n as f64;
    for &d in &diffs[n..] {
        gain = (gain * (n as f64 - 1.0) + d.max(0.0)) / n as f64;
        loss = (loss * (n as f64 - 1.0) + (-d).max(0.0)) / n as f64;
    }
    if loss == 0.0 {
        if gain == 0.0 {
            50.0
        } else {
            100.0
        }
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Indicator::Sma(n) => write!(f, "SMA({n})"),
            Indicator::Ema(n) => write!(f, "EMA({n})"),
            Indicator::Rsi(n) => write!(f, "RSI({n})"),
            Indicator::Macd { fast, slow, signal } => write!(f, "MACD({fast},{slow},{signal})"),
            Indicator::Atr(n) => write!(f, "ATR({n})"),
            Indicator::Bollinger { period, width } => write!(f, "BB({period},{width})"),
            Indicator::Momentum(n) => write!(f, "MOM({n})"),
            Indicator::RateOfChange(n) => write!(f, "ROC({n})"),
            Indicator::Volatility(n) => write!(f, "VOL({n})"),
            Indicator::Obv => f.write_str("OBV"),
        }
    }
}

impl FromStr for Indicator {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || DataError::UnknownIndicator { name: s.to_string() };
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(unknown()),
            None => (s, ""),
        };
        let nums: Vec<&str> = if args.is_empty() { vec![] } else { args.split(',').map(str::trim).collect() };
        let int = |i: usize| -> Result<usize> {
            let v: usize = nums.get(i).ok_or_else(unknown)?.parse().map_err(|_| unknown())?;
            if v == 0 {
                Err(unknown())
            } else {
                Ok(v)
            }
        };
        let one = |ctor: fn(usize) -> Indicator| -> Result<Indicator> {
            if nums.len() != 1 {
                return Err(unknown());
            }
            Ok(ctor(int(0)?))
        };
        match head.to_ascii_uppercase().as_str() {
            "SMA" => one(Indicator::Sma),
            "EMA" => one(Indicator::Ema),
            "RSI" => one(Indicator::Rsi),
            "ATR" => one(Indicator::Atr),
            "MOM" => one(Indicator::Momentum),
            "ROC" => one(Indicator::RateOfChange),
            "VOL" => {
                let ind = one(Indicator::Volatility)?;
                if int(0)? < 2 {
                    return Err(unknown());
                }
                Ok(ind)
            }
            "MACD" if nums.len() == 3 => {
                let (fast, slow, signal) = (int(0)?, int(1)?, int(2)?);
                if fast >= slow {
                    return Err(unknown());
                }
                Ok(Indicator::Macd { fast, slow, signal })
            }
            "BB" if nums.len() == 2 => {
                let width: f64 = nums[1].parse().map_err(|_| unknown())?;
                if !(width > 0.0) {
                    return Err(unknown());
                }
                Ok(Indicator::Bollinger { period: int(0)?, width })
            }
            "OBV" if nums.is_empty() => Ok(Indicator::Obv),
            _ => Err(unknown()),
        }
    }
}

/// Computes a set of named indicators over one bar window.
pub fn indicators<S: AsRef<str>>(bars: &[Bar], set: &[S]) -> Result<IndicatorMap> {
    let parsed = set.iter().map(|s| s.as_ref().parse::<Indicator>()).collect::<Result<Vec<_>>>()?;
    let mut out = IndicatorMap::new();
    for ind in &parsed {
        out.extend(ind.compute(bars)?);
    }
    Ok(out)
}

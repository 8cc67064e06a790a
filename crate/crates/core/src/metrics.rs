//! Profit, risk-adjusted, risk and diversity metrics over an equity curve
//! and its per-asset weight history.
//!
//! Conventions: 252 trading days per year for SR / SoR; ARR spans calendar
//! days / 365; volatility is reported as a daily sample standard deviation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
pub const CALENDAR_DAYS_PER_YEAR: f64 = 365.0;
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{metric}: need at least {needed} observations, have {available}")]
    TooShort { metric: &'static str, needed: usize, available: usize },
    #[error("{metric}: equity values must be positive")]
    NonPositive { metric: &'static str },
    #[error("{metric}: zero variance")]
    ZeroVariance { metric: &'static str },
    #[error("sortino: no negative excess returns")]
    NoDownside,
    #[error("calmar: maximum drawdown is zero")]
    ZeroDrawdown,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

pub fn total_return(curve: &[f64]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(MetricError::TooShort { metric: "total return", needed: 2, available: curve.len() });
    }
    if curve.iter().any(|v| !(*v > 0.0)) {
        return Err(MetricError::NonPositive { metric: "total return" });
    }
    Ok(curve[curve.len() - 1] / curve[0] - 1.0)
}

/// Geometric annualisation `(1 + tr)^(1/span) − 1`.
pub fn annual_return_rate(tr: f64, span_years: f64) -> Result<f64> {
    if !(span_years > 0.0) {
        return Err(MetricError::Invalid(format!("span must be positive, got {span_years}")));
    }
    if !(tr > -1.0) {
        return Err(MetricError::Invalid(format!("total return must exceed -1, got {tr}")));
    }
    Ok((1.0 + tr).powf(1.0 / span_years) - 1.0)
}

pub fn daily_returns(curve: &[f64]) -> Vec<f64> {
    curve.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub fn sharpe(returns: &[f64], risk_free: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricError::TooShort { metric: "sharpe", needed: 2, available: returns.len() });
    }
    let sd = sample_std(returns);
    if !(sd > 1e-15) {
        return Err(MetricError::ZeroVariance { metric: "sharpe" });
    }
    Ok((mean(returns) - risk_free / TRADING_DAYS_PER_YEAR) / sd * TRADING_DAYS_PER_YEAR.sqrt())
}

/// Root-mean-square of the negative part of excess returns (over all days).
pub fn downside_deviation(returns: &[f64], risk_free: f64) -> f64 {
    let rf = risk_free / TRADING_DAYS_PER_YEAR;
    (returns.iter().map(|r| (r - rf).min(0.0).powi(2)).sum::<f64>() / returns.len() as f64).sqrt()
}

pub fn sortino(returns: &[f64], risk_free: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricError::TooShort { metric: "sortino", needed: 2, available: returns.len() });
    }
    let dd = downside_deviation(returns, risk_free);
    if dd == 0.0 {
        return Err(MetricError::NoDownside);
    }
    Ok((mean(returns) - risk_free / TRADING_DAYS_PER_YEAR) / dd * TRADING_DAYS_PER_YEAR.sqrt())
}

pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &v in curve {
        peak = peak.max(v);
        if peak > 0.0 {
            mdd = mdd.max((peak - v) / peak);
        }
    }
    mdd
}

pub fn calmar(arr: f64, mdd: f64) -> Result<f64> {
    if mdd <= 0.0 {
        return Err(MetricError::ZeroDrawdown);
    }
    Ok(arr / mdd)
}

/// Daily sample standard deviation.
pub fn volatility(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricError::TooShort { metric: "volatility", needed: 2, available: returns.len() });
    }
    Ok(sample_std(returns))
}

/// Cash-free weights renormalised to one; `None` when nothing is held.
fn holdings_only(w: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = w.iter().filter(|x| **x > 0.0).sum();
    (s > 0.0).then(|| w.iter().map(|x| x.max(0.0) / s).collect())
}

/// Time-averaged Shannon entropy of per-asset value weights. Days with no
/// holdings are skipped.
pub fn entropy(weight_history: &[Vec<f64>]) -> f64 {
    let per_day: Vec<f64> = weight_history
        .iter()
        .filter_map(|w| holdings_only(w))
        .map(|w| -w.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>())
        .collect();
    if per_day.is_empty() {
        0.0
    } else {
        mean(&per_day)
    }
}

/// Sample covariance of `returns` (rows are days).
pub fn covariance(returns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let t = returns.len();
    if t < 2 {
        return Err(MetricError::TooShort { metric: "covariance", needed: 2, available: t });
    }
    let n = returns[0].len();
    let means: Vec<f64> = (0..n).map(|j| returns.iter().map(|r| r[j]).sum::<f64>() / t as f64).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        returns.iter().map(|r| (r[i] - means[i]) * (r[j] - means[j])).sum::<f64>() / (t as f64 - 1.0)
    }))
}

/// Eigenpairs sorted by descending eigenvalue. Inside a numerically
/// degenerate eigenspace the basis is rebuilt from the projected asset
/// axes, so a diagonal covariance always yields the asset axes.
fn principal_portfolios(cov: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let n = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs: Vec<DVector<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(EIGEN_FLOOR);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (vals[start] - vals[end]).abs() <= 1e-9 * scale {
            end += 1;
        }
        if end - start > 1 {
            let group = &vecs[start..end];
            let mut basis: Vec<DVector<f64>> = Vec::new();
            for axis in 0..n {
                // Project e_axis onto the group subspace, then orthogonalise.
                let mut v = DVector::zeros(n);
                for g in group {
                    v += g * g[axis];
                }
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
                let norm = v.norm();
                if norm > 1e-8 {
                    basis.push(v / norm);
                }
                if basis.len() == end - start {
                    break;
                }
            }
            if basis.len() == end - start {
                vecs.splice(start..end, basis);
            }
        }
        start = end;
    }
    (vals, vecs)
}

/// Effective number of bets of `weights` under covariance `cov`:
/// `exp(−Σ p_k ln p_k)` over the principal-portfolio variance shares.
pub fn effective_bets_cov(weights: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let n = weights.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(MetricError::Invalid(format!("weights {n} vs covariance {}", cov.nrows())));
    }
    let w = DVector::from_column_slice(weights);
    let (vals, vecs) = principal_portfolios(cov);
    let contrib: Vec<f64> = vals.iter().zip(&vecs).map(|(l, e)| l.max(EIGEN_FLOOR) * e.dot(&w).powi(2)).collect();
    let total: f64 = contrib.iter().sum();
    if !(total > 0.0) {
        return Err(MetricError::ZeroVariance { metric: "effective bets" });
    }
    let h: f64 = contrib.iter().map(|c| c / total).filter(|p| *p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(h.exp())
}

/// ENB of the average weights over a block of days.
pub fn effective_bets(weight_history: &[Vec<f64>], return_history: &[Vec<f64>]) -> Result<f64> {
    let held: Vec<Vec<f64>> = weight_history.iter().filter_map(|w| holdings_only(w)).collect();
    if held.is_empty() {
        return Err(MetricError::Invalid("no holdings".into()));
    }
    let n = held[0].len();
    let avg: Vec<f64> = (0..n).map(|j| held.iter().map(|w| w[j]).sum::<f64>() / held.len() as f64).collect();
    effective_bets_cov(&avg, &covariance(return_history)?)
}

/// ENB averaged over consecutive blocks of `cycle` days; blocks without
/// holdings or with fewer than two return rows are skipped.
pub fn effective_bets_by_cycle(weight_history: &[Vec<f64>], return_history: &[Vec<f64>], cycle: usize) -> Option<f64> {
    let cycle = cycle.max(2);
    let vals: Vec<f64> = weight_history
        .chunks(cycle)
        .zip(return_history.chunks(cycle))
        .filter_map(|(w, r)| effective_bets(w, r).ok())
        .collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub trading_days_per_year: f64,
    pub calendar_days_per_year: f64,
    pub risk_free: f64,
    pub volatility: String,
    pub entropy: String,
    pub enb: String,
}

/// The nine evaluation metrics. Ratios that are undefined on the given
/// curve (zero variance, no drawdown, no holdings) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tr: f64,
    pub arr: f64,
    pub sr: Option<f64>,
    pub cr: Option<f64>,
    pub sor: Option<f64>,
    pub mdd: f64,
    pub vol: f64,
    pub ent: f64,
    pub enb: Option<f64>,
    pub span_years: f64,
    pub n_days: usize,
    pub conventions: Conventions,
}

/// Inputs for [`evaluate`].
pub struct EvaluationInput<'a> {
    pub dates: &'a [chrono::NaiveDate],
    pub equity: &'a [f64],
    /// Per-day per-asset value weights (cash excluded from the vector).
    pub weights: &'a [Vec<f64>],
    /// Per-day per-asset simple returns aligned with `weights`.
    pub asset_returns: &'a [Vec<f64>],
    pub cycle_days: usize,
    pub risk_free: f64,
}

pub fn evaluate(input: &EvaluationInput<'_>) -> Result<MetricsReport> {
    let tr = total_return(input.equity)?;
    let days = (*input.dates.last().unwrap() - input.dates[0]).num_days().max(1) as f64;
    let span_years = days / CALENDAR_DAYS_PER_YEAR;
    let arr = annual_return_rate(tr, span_years)?;
    let rets = daily_returns(input.equity);
    let mdd = max_drawdown(input.equity);
    Ok(MetricsReport {
        tr,
        arr,
        sr: sharpe(&rets, input.risk_free).ok(),
        cr: calmar(arr, mdd).ok(),
        sor: sortino(&rets, input.risk_free).ok(),
        mdd,
        vol: volatility(&rets)?,
        ent: entropy(input.weights),
        enb: effective_bets_by_cycle(input.weights, input.asset_returns, input.cycle_days),
        span_years,
        n_days: input.equity.len(),
        conventions: Conventions {
            trading_days_per_year: TRADING_DAYS_PER_YEAR,
            calendar_days_per_year: CALENDAR_DAYS_PER_YEAR,
            risk_free: input.risk_free,
            volatility: "daily sample standard deviation".into(),
            entropy: "time-averaged over per-asset value weights, cash excluded".into(),
            enb: format!("principal-portfolio entropy, averaged over {}-day blocks", input.cycle_days),
        },
    })
}

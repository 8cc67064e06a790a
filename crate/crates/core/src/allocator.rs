//! Budget allocation on the simplex.
//!
//! Maximises `ρ·ω − λ1·sqrt(ωᵀΣω) − λ2·CVaR_α(H·ω)` subject to `ω ≥ 0`,
//! `Σω = 1`, where `H` holds joint historical daily returns and CVaR is the
//! historical-simulation tail mean of portfolio losses. The objective is
//! concave, so projected subgradient ascent finds the global optimum; for
//! small problems a 0.01 simplex grid certifies the result.

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::market::ReturnSeries;

pub const MIN_HISTORY: usize = 20;
pub const DEFAULT_ALPHA: f64 = 0.95;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_CYCLE_DAYS: usize = 30;

const PSD_TOL: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive semidefinite (quadratic form {0})")]
    NotPsd(f64),
    #[error("covariance is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("insufficient history: need {needed} samples, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("optimizer did not converge (last objective {}, iterate {last_iterate:?})", trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { last_iterate: Vec<f64>, trace: Vec<f64> },
}

pub type Result<T, E = AllocError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub rho: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Joint daily returns, one row per day, one column per asset class.
    pub history: Vec<Vec<f64>>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl AllocationProblem {
    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rho.len();
        if n == 0 {
            return Err(AllocError::Dimension("empty problem".into()));
        }
        if self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return Err(AllocError::Dimension(format!("covariance must be {n}x{n}")));
        }
        if let Some(r) = self.history.iter().find(|r| r.len() != n) {
            return Err(AllocError::Dimension(format!("history row has {} columns, expected {n}", r.len())));
        }
        if self.history.len() < MIN_HISTORY {
            return Err(AllocError::InsufficientHistory { needed: MIN_HISTORY, available: self.history.len() });
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(AllocError::Parameter("risk-aversion coefficients must be non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AllocError::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let finite = self.rho.iter().chain(self.cov.iter().flatten()).chain(self.history.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(AllocError::Parameter("non-finite input".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.cov[i][j] - self.cov[j][i]).abs() > PSD_TOL {
                    return Err(AllocError::NotSymmetric(i, j));
                }
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| self.cov[i][j]);
        let min_eig = SymmetricEigen::new(m).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(AllocError::NotPsd(min_eig));
        }
        Ok(())
    }

    /// Portfolio return per historical day.
    pub fn portfolio_returns(&self, omega: &[f64]) -> Vec<f64> {
        self.history.iter().map(|row| row.iter().zip(omega).map(|(r, w)| r * w).sum()).collect()
    }

    pub fn terms(&self, omega: &[f64]) -> Result<ObjectiveTerms> {
        let i_etr = expected_total_return(omega, &self.rho)?;
        let i_pr = portfolio_risk(omega, &self.cov)?;
        let i_cvar = cvar_historical(&self.portfolio_returns(omega), self.alpha)?;
        Ok(ObjectiveTerms {
            i_etr,
            i_pr,
            i_cvar,
            objective: i_etr - self.lambda1 * i_pr - self.lambda2 * i_cvar,
        })
    }

    pub fn objective(&self, omega: &[f64]) -> f64 {
        let i_etr: f64 = omega.iter().zip(&self.rho).map(|(w, r)| w * r).sum();
        let q = quad_form(omega, &self.cov).max(0.0);
        let losses: Vec<f64> = self.portfolio_returns(omega).into_iter().map(|r| -r).collect();
        i_etr - self.lambda1 * q.sqrt() - self.lambda2 * tail_mean(losses, tail_count(self.history.len(), self.alpha))
    }

    /// A supergradient of the objective at `omega`.
    fn gradient(&self, omega: &[f64]) -> Vec<f64> {
        let n = omega.len();
        let mut g = self.rho.clone();
        let q = quad_form(omega, &self.cov);
        if self.lambda1 > 0.0 && q > 1e-300 {
            let s = q.sqrt();
            for i in 0..n {
                let sw: f64 = (0..n).map(|j| self.cov[i][j] * omega[j]).sum();
                g[i] -= self.lambda1 * sw / s;
            }
        }
        if self.lambda2 > 0.0 {
            let losses: Vec<f64> = self.portfolio_returns(omega).into_iter().map(|r| -r).collect();
            let k = tail_count(losses.len(), self.alpha);
            for (row, wt) in tail_weights(&losses, k) {
                // d(loss)/dω = −row; tail mean weight wt / k.
                for i in 0..n {
                    g[i] += self.lambda2 * wt * self.history[row][i] / k as f64;
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub i_etr: f64,
    pub i_pr: f64,
    pub i_cvar: f64,
    pub objective: f64,
}

/// Budget weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub omega: Vec<f64>,
}

impl Weights {
    pub fn uniform(n: usize) -> Self {
        Self { omega: vec![1.0 / n as f64; n] }
    }

    pub fn is_feasible(&self) -> bool {
        self.omega.iter().all(|w| *w >= 0.0) && (self.omega.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub weights: Weights,
    pub terms: ObjectiveTerms,
    /// Best objective after each solver stage.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Iterations per step-size stage.
    pub stage_iters: usize,
    /// Initial step of each stage.
    pub stage_steps: [f64; 6],
    /// Simplex grid resolution (points per unit) used as certificate.
    pub grid_resolution: usize,
    /// Largest dimension for which the grid is enumerated.
    pub grid_max_dim: usize,
    pub exec: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            stage_iters: 400,
            stage_steps: [0.2, 0.05, 1e-2, 1e-3, 1e-4, 1e-5],
            grid_resolution: 100,
            grid_max_dim: 4,
            exec: Execution::default(),
        }
    }
}

pub fn expected_total_return(omega: &[f64], rho: &[f64]) -> Result<f64> {
    if omega.len() != rho.len() {
        return Err(AllocError::Dimension(format!("weights {} vs returns {}", omega.len(), rho.len())));
    }
    Ok(omega.iter().zip(rho).map(|(w, r)| w * r).sum())
}

fn quad_form(omega: &[f64], cov: &[Vec<f64>]) -> f64 {
    let mut q = 0.0;
    for (i, wi) in omega.iter().enumerate() {
        for (j, wj) in omega.iter().enumerate() {
            q += wi * wj * cov[i][j];
        }
    }
    q
}

/// `sqrt(ωᵀΣω)`.
pub fn portfolio_risk(omega: &[f64], cov: &[Vec<f64>]) -> Result<f64> {
    let n = omega.len();
    if cov.len() != n || cov.iter().any(|r| r.len() != n) {
        return Err(AllocError::Dimension(format!("weights {n} vs covariance {}", cov.len())));
    }
    let q = quad_form(omega, cov);
    if q < -1e-10 {
        return Err(AllocError::NotPsd(q));
    }
    Ok(q.max(0.0).sqrt())
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_HISTORY {
        return Err(AllocError::InsufficientHistory { needed: MIN_HISTORY, available: n });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AllocError::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Number of tail samples averaged by CVaR: `⌊(1−α)·n⌋`, at least one.
pub fn tail_count(n: usize, alpha: f64) -> usize {
    (((1.0 - alpha) * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Historical VaR: the `⌈α·n⌉`-th smallest loss (1-based).
pub fn var_historical(returns: &[f64], alpha: f64) -> Result<f64> {
    check_samples(returns.len())?;
    check_alpha(alpha)?;
    let mut losses: Vec<f64> = returns.iter().map(|r| -r).collect();
    losses.sort_by(f64::total_cmp);
    let n = losses.len();
    let idx = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(losses[idx - 1])
}

/// Historical CVaR: mean of the `tail_count` largest losses.
pub fn cvar_historical(returns: &[f64], alpha: f64) -> Result<f64> {
    check_samples(returns.len())?;
    check_alpha(alpha)?;
    let losses: Vec<f64> = returns.iter().map(|r| -r).collect();
    let k = tail_count(losses.len(), alpha);
    Ok(tail_mean(losses, k))
}

fn tail_mean(mut losses: Vec<f64>, k: usize) -> f64 {
    losses.sort_by(f64::total_cmp);
    let n = losses.len();
    losses[n - k..].iter().sum::<f64>() / k as f64
}

/// Per-sample weights of the CVaR tail; samples tied at the cut-off share
/// the remaining weight equally.
fn tail_weights(losses: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let cut = losses[idx[k - 1]];
    let above: Vec<usize> = idx.iter().copied().filter(|&i| losses[i] > cut).collect();
    let tied: Vec<usize> = idx.iter().copied().filter(|&i| losses[i] == cut).collect();
    let share = (k - above.len()) as f64 / tied.len() as f64;
    above.into_iter().map(|i| (i, 1.0)).chain(tied.into_iter().map(|i| (i, share))).collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

/// Every point of the simplex whose coordinates are multiples of `1/res`.
pub fn simplex_grid(n: usize, res: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in 0..=left {
            cur.push(v);
            rec(n - 1, left - v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, res, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Best grid point by objective; ties keep the earliest point.
pub fn grid_search(problem: &AllocationProblem, res: usize, exec: Execution) -> (Vec<f64>, f64) {
    let grid = simplex_grid(problem.dim(), res);
    let values = exec.map(&grid, |p| {
        let w: Vec<f64> = p.iter().map(|&c| c as f64 / res as f64).collect();
        problem.objective(&w)
    });
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    (grid[best].iter().map(|&c| c as f64 / res as f64).collect(), values[best])
}

fn ascend(problem: &AllocationProblem, start: &[f64], opts: &SolverOptions, trace: &mut Vec<f64>) -> (Vec<f64>, f64) {
    let mut best = start.to_vec();
    let mut best_f = problem.objective(&best);
    for &step0 in &opts.stage_steps {
        let mut w = best.clone();
        for t in 0..opts.stage_iters {
            let g = problem.gradient(&w);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            let eta = step0 / ((t + 1) as f64).sqrt();
            let moved: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi + eta * gi / norm).collect();
            w = project_simplex(&moved);
            let f = problem.objective(&w);
            if f > best_f {
                best_f = f;
                best.clone_from(&w);
            }
        }
        trace.push(best_f);
    }
    (best, best_f)
}

/// Solves the allocation problem with default solver options.
pub fn optimize(problem: &AllocationProblem) -> Result<Allocation> {
    optimize_with(problem, &SolverOptions::default())
}

pub fn optimize_with(problem: &AllocationProblem, opts: &SolverOptions) -> Result<Allocation> {
    problem.validate()?;
    let n = problem.dim();
    let mut trace = Vec::new();
    let uniform = Weights::uniform(n).omega;
    let (mut best, mut best_f) = ascend(problem, &uniform, opts, &mut trace);
    if n <= opts.grid_max_dim {
        let (g, gf) = grid_search(problem, opts.grid_resolution, opts.exec);
        if gf > best_f {
            let (w, f) = ascend(problem, &g, opts, &mut trace);
            best = w;
            best_f = f;
        }
    }
    if !best_f.is_finite() || best.iter().any(|w| !w.is_finite()) {
        return Err(AllocError::NonConvergence { last_iterate: best, trace });
    }
    // Clean up projection round-off so the simplex invariant holds tightly.
    for w in &mut best {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    let s: f64 = best.iter().sum();
    best.iter_mut().for_each(|w| *w /= s);
    let weights = Weights { omega: best };
    if !weights.is_feasible() {
        return Err(AllocError::NonConvergence { last_iterate: weights.omega, trace });
    }
    let terms = problem.terms(&weights.omega)?;
    Ok(Allocation { weights, terms, trace })
}

/// Trailing inputs for the allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedInputs {
    pub rho: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub history: Vec<Vec<f64>>,
    pub dates: Vec<NaiveDate>,
}

/// Aligns the series on their common dates, keeps the trailing `window`
/// rows and derives the sample covariance and the rule-mode expected
/// return (mean daily return × `cycle`).
pub fn estimate_inputs(series: &[ReturnSeries], window: usize, cycle: usize) -> Result<EstimatedInputs> {
    if series.is_empty() {
        return Err(AllocError::Dimension("no return series".into()));
    }
    let mut dates: Vec<NaiveDate> = series[0].dates.clone();
    for s in &series[1..] {
        let set: std::collections::BTreeSet<&NaiveDate> = s.dates.iter().collect();
        dates.retain(|d| set.contains(d));
    }
    let take = window.min(dates.len());
    if take < MIN_HISTORY {
        return Err(AllocError::InsufficientHistory { needed: MIN_HISTORY, available: take });
    }
    let dates = dates[dates.len() - take..].to_vec();
    let cols: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let mut out = Vec::with_capacity(take);
            let mut j = 0;
            for d in &dates {
                while s.dates[j] < *d {
                    j += 1;
                }
                out.push(s.returns[j]);
            }
            out
        })
        .collect();
    let n = series.len();
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / take as f64).collect();
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let c = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>()
                / (take as f64 - 1.0);
            cov[i][j] = c;
            cov[j][i] = c;
        }
    }
    let history = (0..take).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
    let rho = means.iter().map(|m| m * cycle as f64).collect();
    Ok(EstimatedInputs { rho, cov, history, dates })
}

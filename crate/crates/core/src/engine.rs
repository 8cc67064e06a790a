//! Daily backtest loop: snapshot, retrieve, decide, crisis check, execute,
//! mark to market, scheduled conferences and reflections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::allocator;
use crate::conferences::{
    self, build_crisis_bundle, class_returns, detect_extreme, run_bac, run_emc, run_esc, AnalystReport, BacParams,
    ConferenceError, ConferenceLog, Trigger,
};
use crate::gateway::{
    Cassette, CassetteMode, Gateway, GatewayConfig, GatewayError, RemoteEmbedder, UsageTotals, DEFAULT_EMBEDDING_MODEL,
    DEFAULT_MODEL, DEFAULT_TEMPERATURE,
};
use crate::market::{AmplitudeMode, AssetClass, AssetSeries, AssetSnapshot, DataError, Dataset};
use crate::memory::{
    retrieve, Embedder, HashEmbedder, MemoryError, MemoryKind, MemoryStore, NewRecord, Query, RetrievalMode, Retrieved,
    DEFAULT_TOP_K, HASH_EMBED_DIM,
};
use crate::metrics::{self, MetricsReport};
use crate::policy::{
    decide, default_profiles, reflect, summarize_query, Action, ActionKind, AgentProfile, Backend, BackendKind,
    DecisionContext, LlmPolicy, Outcome, PolicyError, PositionView, RulePolicy,
};
use crate::Execution;

pub const DEFAULT_INITIAL_CAPITAL: f64 = 1_000_000.0;
pub const DEFAULT_REFLECTION_HORIZON: usize = 4;
pub const DEFAULT_REMOTE_EMBED_DIM: usize = 3072;
const CONTEXT_CHARS: usize = 200;

#[derive(Debug, Error)]
#[error("invalid run config: {}", problems.join("; "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Conference(#[from] ConferenceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no trading days between {start} and {end}")]
    NoTradingDays { start: NaiveDate, end: NaiveDate },
    #[error("invariant breached on {date}: {message}\nstate: {state}")]
    Invariant { date: NaiveDate, message: String, state: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl EngineError {
    pub fn is_determinism_violation(&self) -> bool {
        fn policy(e: &PolicyError) -> bool {
            match e {
                PolicyError::Gateway(g) => g.is_determinism_violation(),
                PolicyError::Memory(m) => memory(m),
                _ => false,
            }
        }
        fn memory(e: &MemoryError) -> bool {
            matches!(e, MemoryError::Backend(m) if m.starts_with("determinism violation"))
        }
        match self {
            EngineError::Gateway(g) => g.is_determinism_violation(),
            EngineError::Policy(p) => policy(p),
            EngineError::Memory(m) => memory(m),
            EngineError::Conference(ConferenceError::Policy(p)) => policy(p),
            EngineError::Conference(ConferenceError::Memory(m)) => memory(m),
            _ => false,
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionPrice {
    #[default]
    Close,
    NextOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

fn d_lambda() -> f64 {
    allocator::DEFAULT_LAMBDA
}
fn d_lambda3() -> f64 {
    conferences::DEFAULT_LAMBDA3
}
fn d_alpha() -> f64 {
    allocator::DEFAULT_ALPHA
}
fn d_cycle() -> u64 {
    allocator::DEFAULT_CYCLE_DAYS as u64
}
fn d_horizon() -> usize {
    DEFAULT_REFLECTION_HORIZON
}
fn d_one() -> f64 {
    1.0
}
fn d_model() -> String {
    DEFAULT_MODEL.into()
}
fn d_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn d_capital() -> f64 {
    DEFAULT_INITIAL_CAPITAL
}
fn d_rounds() -> usize {
    conferences::DEFAULT_ESC_ROUNDS
}
fn d_k() -> usize {
    DEFAULT_TOP_K
}
fn d_window() -> usize {
    allocator::DEFAULT_WINDOW
}
fn d_true() -> bool {
    true
}
fn d_embed_dim() -> usize {
    DEFAULT_REMOTE_EMBED_DIM
}

/// Backtest configuration, read from a JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// First date of data loaded (history for indicators and budgets).
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// First decision date; defaults to `start`.
    #[serde(default)]
    pub test_start: Option<NaiveDate>,
    pub policy_backend: BackendKind,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default)]
    pub fee_bps: f64,
    #[serde(default = "d_lambda")]
    pub lambda1: f64,
    #[serde(default = "d_lambda")]
    pub lambda2: f64,
    #[serde(default = "d_lambda3")]
    pub lambda3: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_cycle")]
    pub bac_cycle_days: u64,
    #[serde(default = "d_horizon")]
    pub reflection_horizon_days: usize,
    #[serde(default = "d_one")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_model")]
    pub model: String,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub cassette_mode: CassetteMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub execution_price: ExecutionPrice,
    #[serde(default = "d_capital")]
    pub initial_capital: f64,
    #[serde(default = "d_rounds")]
    pub esc_rounds: usize,
    #[serde(default)]
    pub risk_free: f64,
    #[serde(default = "d_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub embedder: EmbedderKind,
    #[serde(default = "d_embed_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub amplitude_mode: AmplitudeMode,
    #[serde(default = "d_window")]
    pub allocation_window: usize,
    #[serde(default = "d_true")]
    pub conferences: bool,
    #[serde(default)]
    pub log_prompts: bool,
    /// CSV of `date,symbol,action` rows; replaces a rule backend with the
    /// scripted one (unlisted days hold).
    #[serde(default)]
    pub script: Option<PathBuf>,
}

pub const REQUIRED_KEYS: [&str; 4] = ["data_dir", "start", "end", "policy_backend"];
pub const KNOWN_KEYS: [&str; 32] = [
    "data_dir",
    "start",
    "end",
    "test_start",
    "policy_backend",
    "cassette",
    "fee_bps",
    "lambda1",
    "lambda2",
    "lambda3",
    "alpha",
    "bac_cycle_days",
    "reflection_horizon_days",
    "gamma",
    "seed",
    "model",
    "temperature",
    "cassette_mode",
    "output_dir",
    "execution",
    "execution_price",
    "initial_capital",
    "esc_rounds",
    "risk_free",
    "retrieval_k",
    "embedder",
    "embedding_dim",
    "amplitude_mode",
    "allocation_window",
    "conferences",
    "log_prompts",
    "script",
];

impl RunConfig {
    /// Minimal config with defaults for everything optional.
    pub fn new(data_dir: impl Into<PathBuf>, start: NaiveDate, end: NaiveDate, backend: BackendKind) -> Self {
        let v = serde_json::json!({
            "data_dir": data_dir.into(),
            "start": start,
            "end": end,
            "policy_backend": backend,
        });
        serde_json::from_value(v).expect("defaults deserialize")
    }

    pub fn test_start(&self) -> NaiveDate {
        self.test_start.unwrap_or(self.start)
    }

    /// Parses and validates; relative paths resolve against `base_dir`.
    /// Every problem found is reported together.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let err = |p: Vec<String>| ConfigError { problems: p };
        let v: Value = serde_json::from_str(text).map_err(|e| err(vec![format!("not valid JSON: {e}")]))?;
        let Value::Object(map) = &v else {
            return Err(err(vec!["config must be a JSON object".into()]));
        };
        let mut problems: Vec<String> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .map(|k| format!("unknown key `{k}`"))
            .collect();
        problems.extend(REQUIRED_KEYS.iter().filter(|k| !map.contains_key(**k)).map(|k| format!("missing key `{k}`")));
        if !problems.is_empty() {
            return Err(err(problems));
        }
        let baseline = serde_json::json!({
            "data_dir": ".", "start": "2000-01-01", "end": "2000-01-02", "policy_backend": "hold",
        });
        for (k, val) in map {
            let mut single = baseline.clone();
            single[k.as_str()] = val.clone();
            if let Err(e) = serde_json::from_value::<RunConfig>(single) {
                problems.push(format!("`{k}`: {e}"));
            }
        }
        problems.dedup();
        if !problems.is_empty() {
            return Err(err(problems));
        }
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| err(vec![e.to_string()]))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        if let Some(c) = cfg.cassette.as_mut() {
            resolve(c);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        if let Some(o) = cfg.script.as_mut() {
            resolve(o);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { problems: vec![format!("{}: {e}", path.display())] })?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        let ts = self.test_start();
        if self.start > self.end {
            p.push(format!("start {} is after end {}", self.start, self.end));
        }
        if ts < self.start || ts > self.end {
            p.push(format!("test_start {ts} outside [{}, {}]", self.start, self.end));
        }
        let mut range = |name: &str, x: f64, ok: bool| {
            if !x.is_finite() || !ok {
                p.push(format!("`{name}` = {x} out of range"));
            }
        };
        range("fee_bps", self.fee_bps, (0.0..10_000.0).contains(&self.fee_bps));
        range("lambda1", self.lambda1, self.lambda1 >= 0.0);
        range("lambda2", self.lambda2, self.lambda2 >= 0.0);
        range("lambda3", self.lambda3, (0.0..=1.0).contains(&self.lambda3));
        range("alpha", self.alpha, self.alpha > 0.0 && self.alpha < 1.0);
        range("gamma", self.gamma, self.gamma > 0.0 && self.gamma <= 1.0);
        range("temperature", self.temperature, (0.0..=2.0).contains(&self.temperature));
        range("initial_capital", self.initial_capital, self.initial_capital > 0.0);
        range("risk_free", self.risk_free, true);
        let mut at_least = |name: &str, x: usize, min: usize| {
            if x < min {
                p.push(format!("`{name}` = {x} must be at least {min}"));
            }
        };
        at_least("bac_cycle_days", self.bac_cycle_days as usize, 1);
        at_least("reflection_horizon_days", self.reflection_horizon_days, 1);
        at_least("esc_rounds", self.esc_rounds, 1);
        at_least("retrieval_k", self.retrieval_k, 1);
        at_least("embedding_dim", self.embedding_dim, 1);
        at_least("allocation_window", self.allocation_window, allocator::MIN_HISTORY);
        if !self.data_dir.is_dir() {
            p.push(format!("data_dir {} is not a directory", self.data_dir.display()));
        }
        if self.policy_backend == BackendKind::Llm {
            match (&self.cassette, self.cassette_mode) {
                (None, CassetteMode::Replay) => p.push("llm backend in replay mode needs `cassette`".into()),
                (None, CassetteMode::Record) => p.push("record mode needs `cassette`".into()),
                (Some(c), CassetteMode::Replay) if !c.is_file() => {
                    p.push(format!("cassette {} not found", c.display()))
                }
                _ => {}
            }
        } else if self.embedder == EmbedderKind::Remote {
            p.push("`embedder` = remote requires the llm backend".into());
        }
        if let Some(script) = &self.script {
            if self.policy_backend == BackendKind::Llm {
                p.push("`script` cannot be combined with the llm backend".into());
            } else if let Err(e) = load_script(script) {
                p.push(e.to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub date: NaiveDate,
    pub symbol: String,
    pub side: Side,
    pub quantity: f64,
    pub price: f64,
    pub notional: f64,
    /// Fee paid, `notional × fee rate`.
    pub cost: f64,
}

/// Cash, holdings and class budgets. Positions and prices are indexed by
/// dataset asset order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioState {
    pub cash: f64,
    pub positions: Vec<f64>,
    pub prices: Vec<Option<f64>>,
    pub classes: Vec<AssetClass>,
    pub budgets: [f64; 3],
}

impl PortfolioState {
    pub fn new(cash: f64, classes: Vec<AssetClass>) -> Self {
        let n = classes.len();
        Self { cash, positions: vec![0.0; n], prices: vec![None; n], classes, budgets: [1.0 / 3.0; 3] }
    }

    pub fn asset_value(&self, idx: usize) -> f64 {
        self.prices[idx].map(|p| p * self.positions[idx]).unwrap_or(0.0)
    }

    pub fn total_value(&self) -> f64 {
        self.cash + (0..self.positions.len()).map(|i| self.asset_value(i)).sum::<f64>()
    }

    pub fn class_value(&self, class: AssetClass) -> f64 {
        (0..self.positions.len()).filter(|i| self.classes[*i] == class).map(|i| self.asset_value(i)).sum()
    }

    fn check(&self) -> Result<(), String> {
        if !(self.cash >= 0.0) {
            return Err(format!("negative cash {}", self.cash));
        }
        if let Some(i) = self.positions.iter().position(|q| !(*q >= 0.0)) {
            return Err(format!("negative position {} in asset {i}", self.positions[i]));
        }
        let v = self.total_value();
        if !(v > 0.0) || !v.is_finite() {
            return Err(format!("total value {v}"));
        }
        Ok(())
    }
}

/// Applies one buy or sell at `price`. Buys spend `fraction` of the class
/// pool `min(cash, max(0, budget·V − class value))`, fee included; sells
/// release `fraction` of the held quantity.
pub fn execute(
    kind: ActionKind,
    idx: usize,
    state: &mut PortfolioState,
    price: f64,
    fee_rate: f64,
) -> Option<(Side, f64, f64, f64)> {
    let fraction = kind.fraction();
    if kind.is_buy() {
        let class = state.classes[idx];
        let v = state.total_value();
        let room = (state.budgets[class.index()] * v - state.class_value(class)).max(0.0);
        let spend = fraction * state.cash.min(room);
        if spend <= 1e-9 * v.max(1.0) {
            log::debug!("buy on asset {idx}: no budget room");
            return None;
        }
        let mut q = spend / (price * (1.0 + fee_rate));
        let mut notional = q * price;
        let mut cost = notional * fee_rate;
        if notional + cost > state.cash {
            log::warn!("buy on asset {idx}: scaled to available cash");
            q = state.cash / (price * (1.0 + fee_rate));
            notional = q * price;
            cost = notional * fee_rate;
        }
        state.cash = (state.cash - notional - cost).max(0.0);
        state.positions[idx] += q;
        Some((Side::Buy, q, notional, cost))
    } else if kind.is_sell() {
        let held = state.positions[idx];
        if held <= 0.0 {
            log::warn!("{kind} on asset {idx} with no position");
            return None;
        }
        let q = if fraction >= 1.0 { held } else { fraction * held };
        let notional = q * price;
        let cost = notional * fee_rate;
        state.cash += notional - cost;
        state.positions[idx] = if fraction >= 1.0 { 0.0 } else { held - q };
        Some((Side::Sell, q, notional, cost))
    } else {
        None
    }
}

/// Per-step rewards `r_t` (daily simple portfolio returns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub gamma: f64,
    pub rewards: Vec<f64>,
}

impl RewardTrace {
    pub fn from_equity(equity: &[f64], gamma: f64) -> Self {
        Self { gamma, rewards: metrics::daily_returns(equity) }
    }

    /// `Σ γ^t r_t`.
    pub fn discounted_sum(&self) -> f64 {
        let mut g = 1.0;
        let mut s = 0.0;
        for r in &self.rewards {
            s += g * r;
            g *= self.gamma;
        }
        s
    }

    /// `Π(1 + r_t) − 1`; equals the curve's total return.
    pub fn compounded(&self) -> f64 {
        self.rewards.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub date: NaiveDate,
    pub agent: String,
    pub symbol: String,
    pub action: ActionKind,
    pub rationale: String,
    pub fallback: bool,
    /// Replaced by an extreme market conference.
    pub overridden: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub gamma: f64,
    pub discounted_sum: f64,
    pub compounded: f64,
    pub steps: usize,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub metrics: Option<MetricsReport>,
    pub reward: RewardSummary,
    pub fills: usize,
    pub fallbacks: usize,
    pub conferences: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_usage: Option<UsageTotals>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub equity: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub budgets: Vec<[f64; 3]>,
    pub fills: Vec<Fill>,
    pub reward: RewardTrace,
    pub metrics: Option<MetricsReport>,
    pub conferences: Vec<ConferenceLog>,
    pub decisions: Vec<DecisionLog>,
    pub memory: Vec<MemoryStore>,
    pub usage: Option<UsageTotals>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

impl RunArtifacts {
    pub fn total_return(&self) -> f64 {
        self.equity.last().unwrap() / self.equity[0] - 1.0
    }

    pub fn summary(&self) -> RunSummary {
        let mut counts = BTreeMap::new();
        for c in &self.conferences {
            *counts.entry(serde_json::to_value(c.kind).unwrap().as_str().unwrap().to_string()).or_insert(0) += 1;
        }
        RunSummary {
            metrics: self.metrics.clone(),
            reward: RewardSummary {
                gamma: self.reward.gamma,
                discounted_sum: self.reward.discounted_sum(),
                compounded: self.reward.compounded(),
                steps: self.reward.rewards.len(),
            },
            fills: self.fills.len(),
            fallbacks: self.decisions.iter().filter(|d| d.fallback).count(),
            conferences: counts,
            llm_usage: self.usage,
        }
    }

    pub fn equity_csv(&self) -> String {
        let mut s = String::from("date,total_value\n");
        for (d, v) in self.dates.iter().zip(&self.equity) {
            let _ = writeln!(s, "{d},{v}");
        }
        s
    }

    pub fn fills_csv(&self) -> String {
        let mut s = String::from("date,symbol,side,quantity,price,notional,cost\n");
        for f in &self.fills {
            let side = if f.side == Side::Buy { "buy" } else { "sell" };
            let _ = writeln!(s, "{},{},{side},{},{},{},{}", f.date, f.symbol, f.quantity, f.price, f.notional, f.cost);
        }
        s
    }

    pub fn weights_csv(&self) -> String {
        let mut s = format!("date,{}\n", self.symbols.join(","));
        for (d, w) in self.dates.iter().zip(&self.weights) {
            let row: Vec<String> = w.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{d},{}", row.join(","));
        }
        s
    }

    pub fn budgets_csv(&self) -> String {
        let mut s = String::from("date,crypto,equity,forex\n");
        for (d, b) in self.dates.iter().zip(&self.budgets) {
            let _ = writeln!(s, "{d},{},{},{}", b[0], b[1], b[2]);
        }
        s
    }

    /// Writes every run artifact under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let logs = dir.join("logs");
        let mem = dir.join("memory");
        for d in [dir, &logs, &mem] {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        let put = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io_err(&p))
        };
        put("equity.csv", self.equity_csv())?;
        put("fills.csv", self.fills_csv())?;
        put("weights.csv", self.weights_csv())?;
        put("budgets.csv", self.budgets_csv())?;
        put("metrics.json", serde_json::to_string_pretty(&self.summary()).expect("summary serializes") + "\n")?;
        let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
        put(
            conferences::LOG_FILE,
            jsonl(self.conferences.iter().map(|c| serde_json::to_string(c).expect("log serializes")).collect()),
        )?;
        put(
            "logs/decisions.jsonl",
            jsonl(self.decisions.iter().map(|c| serde_json::to_string(c).expect("log serializes")).collect()),
        )?;
        for store in &self.memory {
            let p = mem.join(format!("{}_{}.jsonl", store.owner().to_lowercase(), store.kind().code()));
            store.save_jsonl(&p)?;
        }
        Ok(())
    }
}

pub type Script = BTreeMap<(NaiveDate, String), ActionKind>;

/// Reads a `date,symbol,action` CSV.
pub fn load_script(path: &Path) -> Result<Script, ConfigError> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        symbol: String,
        action: String,
    }
    let fail = |m: String| ConfigError { problems: vec![format!("script {}: {m}", path.display())] };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let mut out = Script::new();
    for row in rdr.deserialize::<Row>() {
        let r = row.map_err(|e| fail(e.to_string()))?;
        let kind: ActionKind = r.action.parse().map_err(|_| fail(format!("unknown action `{}`", r.action)))?;
        if out.insert((r.date, r.symbol.clone()), kind).is_some() {
            return Err(fail(format!("duplicate row for {} {}", r.date, r.symbol)));
        }
    }
    Ok(out)
}

/// Equal split over the classes that have at least one asset.
pub fn initial_budgets(classes: &[AssetClass]) -> [f64; 3] {
    let present: Vec<bool> = AssetClass::ALL.iter().map(|c| classes.contains(c)).collect();
    let k = present.iter().filter(|p| **p).count().max(1) as f64;
    let mut b = [0.0; 3];
    for (i, p) in present.iter().enumerate() {
        if *p {
            b[i] = 1.0 / k;
        }
    }
    b
}

/// Keeps bars and news dated within `[start, end]`.
pub fn restrict(ds: &Dataset, start: NaiveDate, end: NaiveDate) -> Result<Dataset> {
    let series: Vec<AssetSeries> = ds
        .series()
        .iter()
        .map(|s| AssetSeries {
            asset: s.asset.clone(),
            bars: s.bars.iter().filter(|b| b.date >= start && b.date <= end).copied().collect(),
            news: s.news.iter().filter(|n| n.date >= start && n.date <= end).cloned().collect(),
        })
        .filter(|s| !s.bars.is_empty())
        .collect();
    if series.is_empty() {
        return Err(EngineError::NoTradingDays { start, end });
    }
    Ok(Dataset::new(series)?)
}

struct Task<'a> {
    agent: usize,
    idx: usize,
    snap: &'a AssetSnapshot,
    query: String,
    retrieved: Vec<Retrieved>,
}

struct PendingReflection {
    agent: usize,
    idx: usize,
    action: Action,
    decided: NaiveDate,
    bar_index: usize,
    price: f64,
    quantity: f64,
    context: String,
}

pub struct Engine {
    cfg: RunConfig,
    ds: Dataset,
    backend: Backend,
    gateway: Option<Arc<Gateway>>,
    embedder: Arc<dyn Embedder>,
    analysts: Vec<AgentProfile>,
    manager: AgentProfile,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Gateway for an LLM run as configured: replay never gets a transport.
pub fn gateway_for(cfg: &RunConfig) -> Result<Gateway> {
    let cassette = match &cfg.cassette {
        Some(p) => Cassette::open(p, cfg.cassette_mode)?,
        None => Cassette::in_memory(CassetteMode::Passthrough, vec![]),
    };
    let gc = GatewayConfig::from_env();
    let transport: Option<Box<dyn crate::gateway::Transport>> = match cassette.mode {
        CassetteMode::Replay => None,
        #[cfg(feature = "http")]
        _ => Some(Box::new(crate::gateway::HttpTransport)),
        #[cfg(not(feature = "http"))]
        _ => None,
    };
    Ok(Gateway::new(gc, transport, cassette))
}

impl Engine {
    /// Loads the data directory and wires the configured backend.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = Dataset::load_dir(&cfg.data_dir)?;
        if cfg.policy_backend == BackendKind::Llm {
            let g = Arc::new(gateway_for(cfg)?);
            Self::with_gateway(cfg.clone(), ds, g)
        } else if let Some(path) = &cfg.script {
            let script = load_script(path)?;
            Self::new(cfg.clone(), ds, Backend::Rule(RulePolicy::Scripted(Arc::new(script))))
        } else {
            Self::new(cfg.clone(), ds, Backend::rule(cfg.policy_backend).expect("rule backend"))
        }
    }

    pub fn new(cfg: RunConfig, ds: Dataset, backend: Backend) -> Result<Self> {
        let gateway = backend.llm().map(|l| l.gateway.clone());
        Self::build(cfg, ds, backend, gateway)
    }

    /// LLM-backed engine over an existing gateway.
    pub fn with_gateway(cfg: RunConfig, ds: Dataset, gateway: Arc<Gateway>) -> Result<Self> {
        let backend = Backend::Llm(LlmPolicy { gateway: gateway.clone(), model: cfg.model.clone(), temperature: cfg.temperature });
        Self::build(cfg, ds, backend, Some(gateway))
    }

    fn build(cfg: RunConfig, ds: Dataset, backend: Backend, gateway: Option<Arc<Gateway>>) -> Result<Self> {
        let ds = restrict(&ds, cfg.start, cfg.end)?;
        let embedder: Arc<dyn Embedder> = match (cfg.embedder, &gateway) {
            (EmbedderKind::Remote, Some(g)) => {
                Arc::new(RemoteEmbedder { gateway: g.clone(), model: DEFAULT_EMBEDDING_MODEL.into(), dim: cfg.embedding_dim })
            }
            _ => Arc::new(HashEmbedder { dim: HASH_EMBED_DIM, seed: cfg.seed }),
        };
        let (analysts, manager) = default_profiles(cfg.policy_backend);
        Ok(Self { cfg, ds, backend, gateway, embedder, analysts, manager })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn position_view(&self, state: &PortfolioState, idx: usize) -> PositionView {
        let class = state.classes[idx];
        PositionView {
            quantity: state.positions[idx],
            price: state.prices[idx].unwrap_or(0.0),
            value: state.asset_value(idx),
            class_value: state.class_value(class),
            class_budget: state.budgets[class.index()],
            class_assets: state.classes.iter().filter(|c| **c == class).count(),
            total_value: state.total_value(),
            cash: state.cash,
        }
    }

    fn invariant(&self, date: NaiveDate, state: &PortfolioState) -> Result<()> {
        state.check().map_err(|message| EngineError::Invariant {
            date,
            message,
            state: serde_json::to_string(state).unwrap_or_default(),
        })
    }

    /// Runs the backtest from `test_start` to `end`.
    pub fn run(&self) -> Result<RunArtifacts> {
        let cfg = &self.cfg;
        let ds = &self.ds;
        let test_start = cfg.test_start();
        let calendar: Vec<NaiveDate> =
            ds.calendar().iter().copied().filter(|d| *d >= test_start && *d <= cfg.end).collect();
        if calendar.is_empty() {
            return Err(EngineError::NoTradingDays { start: test_start, end: cfg.end });
        }
        let exec = cfg.execution;
        let fee = cfg.fee_bps / 10_000.0;
        let classes: Vec<AssetClass> = ds.series().iter().map(|s| s.asset.asset_class).collect();
        let symbols: Vec<String> = ds.series().iter().map(|s| s.asset.symbol.clone()).collect();
        let n = classes.len();
        let dim = self.embedder.dim();
        let mut state = PortfolioState::new(cfg.initial_capital, classes.clone());
        state.budgets = initial_budgets(&classes);
        for (idx, p) in state.prices.iter_mut().enumerate() {
            *p = ds.last_bar(idx, test_start - Days::new(1)).map(|b| b.valuation_price(classes[idx]));
        }
        let mut mi: Vec<MemoryStore> =
            self.analysts.iter().map(|a| MemoryStore::new(&a.name, MemoryKind::MarketInformation, dim)).collect();
        let mut ir: Vec<MemoryStore> =
            self.analysts.iter().map(|a| MemoryStore::new(&a.name, MemoryKind::InvestmentReflection, dim)).collect();
        let mut ge = MemoryStore::new("shared", MemoryKind::GeneralExperience, dim);

        let mut bac_params = BacParams {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            alpha: cfg.alpha,
            window: cfg.allocation_window,
            cycle_days: cfg.bac_cycle_days as usize,
            ..BacParams::default()
        };
        bac_params.solver.exec = exec;
        if cfg.policy_backend == BackendKind::MeanVariance {
            bac_params.lambda2 = 0.0;
        }

        let mut out = RunArtifacts {
            symbols,
            dates: Vec::with_capacity(calendar.len()),
            equity: Vec::with_capacity(calendar.len()),
            weights: Vec::with_capacity(calendar.len()),
            budgets: Vec::with_capacity(calendar.len()),
            fills: Vec::new(),
            reward: RewardTrace { gamma: cfg.gamma, rewards: vec![] },
            metrics: None,
            conferences: Vec::new(),
            decisions: Vec::new(),
            memory: Vec::new(),
            usage: None,
        };
        let mut asset_returns: Vec<Vec<f64>> = Vec::with_capacity(calendar.len());
        let mut pending: Vec<PendingReflection> = Vec::new();
        let mut queued: Vec<(usize, ActionKind)> = Vec::new();
        let mut class_pnl = [0.0; 3];
        let mut cycle_value = cfg.initial_capital;
        let mut next_bac = test_start;
        let mut last_bac: Option<NaiveDate> = None;

        for &date in &calendar {
            let prev_close: Vec<Option<f64>> = state.prices.clone();
            let reprice = |state: &mut PortfolioState, class_pnl: &mut [f64; 3], open: bool| {
                for idx in 0..n {
                    if let Some(bar) = ds.bar_on(idx, date) {
                        let p = if open { bar.valuation_open(classes[idx]) } else { bar.valuation_price(classes[idx]) };
                        if let Some(old) = state.prices[idx] {
                            class_pnl[classes[idx].index()] += state.positions[idx] * (p - old);
                        }
                        state.prices[idx] = Some(p);
                    }
                }
            };

            if cfg.execution_price == ExecutionPrice::NextOpen {
                reprice(&mut state, &mut class_pnl, true);
                for (idx, kind) in std::mem::take(&mut queued) {
                    if ds.bar_on(idx, date).is_none() {
                        continue;
                    }
                    let price = state.prices[idx].expect("priced today");
                    self.fill(&mut state, &mut out.fills, &mut class_pnl, date, idx, kind, price, fee);
                }
            }
            reprice(&mut state, &mut class_pnl, false);

            let snapshot = ds.snapshot(date)?;
            // Retrieval, then today's query goes into market-information memory.
            let mut tasks: Vec<Task<'_>> = Vec::new();
            for (ai, agent) in self.analysts.iter().enumerate() {
                for snap in snapshot.assets.iter().filter(|a| Some(a.asset.asset_class) == agent.asset_class) {
                    let idx = ds.asset_index(&snap.asset.symbol).expect("snapshot asset");
                    let query = summarize_query(agent, snap);
                    let emb = self.embedder.embed(&query)?;
                    let q = Query::new(query.clone(), emb.clone(), cfg.retrieval_k);
                    let retrieved = retrieve(&[&mi[ai], &ir[ai], &ge], &q, date, RetrievalMode::Pooled, exec);
                    mi[ai].insert(NewRecord::new(date, query.clone(), emb).with_meta("symbol", &snap.asset.symbol), date)?;
                    tasks.push(Task { agent: ai, idx, snap, query, retrieved });
                }
            }

            let views: Vec<PositionView> = tasks.iter().map(|t| self.position_view(&state, t.idx)).collect();
            let run_one = |i: usize| {
                let t = &tasks[i];
                let ctx = DecisionContext { date, asset: t.snap, retrieved: &t.retrieved, position: views[i] };
                decide(&self.backend, &self.analysts[t.agent], &ctx)
            };
            let decisions = if self.backend.is_rule() {
                exec.map_range(tasks.len(), run_one)
            } else {
                (0..tasks.len()).map(run_one).collect()
            };
            let mut decisions = decisions.into_iter().collect::<Result<Vec<_>, _>>()?;
            let mut overridden = vec![false; tasks.len()];

            if cfg.conferences {
                let triggers = detect_extreme(ds, date, cfg.amplitude_mode);
                for (i, t) in tasks.iter().enumerate() {
                    let mine: Vec<Trigger> =
                        triggers.iter().filter(|tr| tr.asset.symbol == t.snap.asset.symbol).cloned().collect();
                    if mine.is_empty() {
                        continue;
                    }
                    let agent = &self.analysts[t.agent];
                    let peers: Vec<&AgentProfile> = self.analysts.iter().filter(|a| a.name != agent.name).collect();
                    let bundle = build_crisis_bundle(
                        agent,
                        &self.manager,
                        &peers,
                        &mine,
                        &views[i],
                        &decisions[i].action,
                        cfg.lambda3,
                    )?;
                    let (action, log) = run_emc(date, &bundle, &self.backend)?;
                    decisions[i].action = action;
                    overridden[i] = true;
                    out.conferences.push(log);
                }
            }

            for (i, t) in tasks.iter().enumerate() {
                let d = &decisions[i];
                out.decisions.push(DecisionLog {
                    date,
                    agent: self.analysts[t.agent].name.clone(),
                    symbol: t.snap.asset.symbol.clone(),
                    action: d.action.kind,
                    rationale: d.action.rationale.clone(),
                    fallback: d.fallback,
                    overridden: overridden[i],
                    prompt: cfg.log_prompts.then(|| d.prompt.clone()),
                });
                let targets: Vec<(usize, ActionKind)> = if d.action.kind == ActionKind::CloseAll {
                    (0..n)
                        .filter(|j| classes[*j] == classes[t.idx] && ds.bar_on(*j, date).is_some())
                        .map(|j| (j, ActionKind::SellAll))
                        .collect()
                } else {
                    vec![(t.idx, d.action.kind)]
                };
                for (idx, kind) in targets {
                    if kind == ActionKind::Hold {
                        continue;
                    }
                    match cfg.execution_price {
                        ExecutionPrice::Close => {
                            let price = state.prices[idx].expect("priced today");
                            self.fill(&mut state, &mut out.fills, &mut class_pnl, date, idx, kind, price, fee);
                        }
                        ExecutionPrice::NextOpen => queued.push((idx, kind)),
                    }
                }
            }

            self.invariant(date, &state)?;
            let v = state.total_value();
            out.dates.push(date);
            out.equity.push(v);
            out.weights.push((0..n).map(|i| state.asset_value(i) / v).collect());
            asset_returns.push(
                (0..n)
                    .map(|i| match (prev_close[i], state.prices[i]) {
                        (Some(a), Some(b)) if ds.bar_on(i, date).is_some() => b / a - 1.0,
                        _ => 0.0,
                    })
                    .collect(),
            );

            if cfg.conferences && date >= next_bac {
                while next_bac <= date {
                    next_bac = next_bac + Days::new(cfg.bac_cycle_days);
                }
                if let Some(prev) = last_bac {
                    let agents: Vec<(&AgentProfile, &MemoryStore)> = self.analysts.iter().zip(ir.iter()).collect();
                    let (_, log) = run_esc(date, prev, &agents, &mut ge, cfg.esc_rounds, &self.backend, &*self.embedder)?;
                    out.conferences.push(log);
                }
                let trailing = class_returns(ds, date);
                let reports: Vec<AnalystReport> = self
                    .analysts
                    .iter()
                    .map(|a| {
                        let c = a.asset_class.expect("analyst class");
                        let mean = trailing.iter().find(|(k, _)| *k == c).and_then(|(_, s)| {
                            let tail = &s.returns[s.returns.len().saturating_sub(allocator::MIN_HISTORY)..];
                            (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
                        });
                        AnalystReport::new(a, class_pnl[c.index()] / cycle_value, state.class_value(c), mean)
                    })
                    .collect();
                let bac = run_bac(ds, date, &reports, &self.manager, &self.backend, &bac_params, state.budgets)?;
                state.budgets = bac.budgets;
                out.conferences.push(bac.log);
                class_pnl = [0.0; 3];
                cycle_value = v;
                last_bac = Some(date);
            }
            out.budgets.push(state.budgets);

            let mut still = Vec::with_capacity(pending.len());
            for p in pending.drain(..) {
                let bars = ds.bars_upto(p.idx, date);
                if ds.bar_on(p.idx, date).is_some() && bars.len() > p.bar_index + cfg.reflection_horizon_days {
                    let price = state.prices[p.idx].expect("priced today");
                    let outcome = Outcome {
                        decided: p.decided,
                        realized: date,
                        horizon_days: cfg.reflection_horizon_days,
                        realized_return: price / p.price - 1.0,
                        pnl: p.quantity * (price - p.price),
                        context: p.context,
                    };
                    let rec = reflect(&self.analysts[p.agent], &p.action, &outcome, &*self.embedder)?;
                    ir[p.agent].insert(rec, date)?;
                } else {
                    still.push(p);
                }
            }
            pending = still;
            for (i, t) in tasks.iter().enumerate() {
                pending.push(PendingReflection {
                    agent: t.agent,
                    idx: t.idx,
                    action: decisions[i].action.clone(),
                    decided: date,
                    bar_index: ds.bars_upto(t.idx, date).len() - 1,
                    price: state.prices[t.idx].expect("priced today"),
                    quantity: state.positions[t.idx],
                    context: t.query.chars().take(CONTEXT_CHARS).collect(),
                });
            }
        }

        out.reward = RewardTrace::from_equity(&out.equity, cfg.gamma);
        out.metrics = match metrics::evaluate(&metrics::EvaluationInput {
            dates: &out.dates,
            equity: &out.equity,
            weights: &out.weights,
            asset_returns: &asset_returns,
            cycle_days: cfg.bac_cycle_days as usize,
            risk_free: cfg.risk_free,
        }) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("metrics unavailable: {e}");
                None
            }
        };
        out.memory = mi.into_iter().chain(ir).chain(std::iter::once(ge)).collect();
        out.usage = self.gateway.as_ref().map(|g| g.usage());
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn fill(
        &self,
        state: &mut PortfolioState,
        fills: &mut Vec<Fill>,
        class_pnl: &mut [f64; 3],
        date: NaiveDate,
        idx: usize,
        kind: ActionKind,
        price: f64,
        fee: f64,
    ) {
        if let Some((side, quantity, notional, cost)) = execute(kind, idx, state, price, fee) {
            class_pnl[state.classes[idx].index()] -= cost;
            fills.push(Fill { date, symbol: self.ds.series()[idx].asset.symbol.clone(), side, quantity, price, notional, cost });
        }
    }
}

/// Loads, runs and (when `output_dir` is set) writes one config.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let art = Engine::from_config(cfg)?.run()?;
    if let Some(dir) = &cfg.output_dir {
        art.write(dir)?;
    }
    Ok(art)
}

/// Independent runs, fanned out per `exec`; results keep input order.
pub fn run_sweep(cfgs: &[RunConfig], exec: Execution) -> Vec<Result<RunArtifacts>> {
    exec.map(cfgs, |c| Engine::from_config(c).and_then(|e| e.run()))
}

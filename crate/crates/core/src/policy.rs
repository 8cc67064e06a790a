//! Action space, prompt templates, response parsing and decision backends.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, DEFAULT_MODEL, DEFAULT_TEMPERATURE};
use crate::market::AssetSnapshot;
use crate::market::{AssetClass, AssetId};
use crate::memory::{Embedder, MemoryError, NewRecord, Retrieved};

pub const FALLBACK_RATIONALE: &str = "fallback: unparseable response";
pub const NO_NEWS_MARKER: &str = "(no news today)";
pub const TSM_SIGNAL: &str = "ROC(252)";
pub const ZMR_SIGNAL: &str = "BB(20,2).z";
pub const ZMR_THRESHOLD: f64 = 1.0;
/// Relative band around the per-asset target inside which MV holds.
pub const MV_BAND: f64 = 0.05;
/// Cap on the rule-built retrieval query.
pub const QUERY_MAX_CHARS: usize = 480;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("template `{template}`: unresolved placeholder `{{{placeholder}}}`")]
    Template { template: &'static str, placeholder: String },
    #[error("template `{template}`: malformed skeleton at byte {offset}")]
    Skeleton { template: &'static str, offset: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("unknown policy backend `{0}` (expected tsm, zmr, mv, buy_and_hold, hold or llm)")]
    UnknownBackend(String),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    BuyQuarter,
    BuyHalf,
    BuyAll,
    SellQuarter,
    SellHalf,
    SellAll,
    Hold,
    CloseAll,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::BuyQuarter,
        ActionKind::BuyHalf,
        ActionKind::BuyAll,
        ActionKind::SellQuarter,
        ActionKind::SellHalf,
        ActionKind::SellAll,
        ActionKind::Hold,
        ActionKind::CloseAll,
    ];

    pub fn fraction(self) -> f64 {
        match self {
            ActionKind::BuyQuarter | ActionKind::SellQuarter => 0.25,
            ActionKind::BuyHalf | ActionKind::SellHalf => 0.5,
            ActionKind::BuyAll | ActionKind::SellAll | ActionKind::CloseAll => 1.0,
            ActionKind::Hold => 0.0,
        }
    }

    pub fn is_buy(self) -> bool {
        matches!(self, ActionKind::BuyQuarter | ActionKind::BuyHalf | ActionKind::BuyAll)
    }

    pub fn is_sell(self) -> bool {
        matches!(self, ActionKind::SellQuarter | ActionKind::SellHalf | ActionKind::SellAll | ActionKind::CloseAll)
    }

    pub fn wire_name(self) -> &'static str {
        match self {
            ActionKind::BuyQuarter => "BUY_QUARTER",
            ActionKind::BuyHalf => "BUY_HALF",
            ActionKind::BuyAll => "BUY_ALL",
            ActionKind::SellQuarter => "SELL_QUARTER",
            ActionKind::SellHalf => "SELL_HALF",
            ActionKind::SellAll => "SELL_ALL",
            ActionKind::Hold => "HOLD",
            ActionKind::CloseAll => "CLOSE_ALL",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for ActionKind {
    type Err = String;

    /// Accepts upper-snake names case-insensitively, with `-` or spaces in
    /// place of underscores.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c.to_ascii_uppercase() })
            .collect();
        ActionKind::ALL.into_iter().find(|k| k.wire_name() == norm).ok_or_else(|| format!("unknown action `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub asset: AssetId,
    pub kind: ActionKind,
    pub fraction: f64,
    pub rationale: String,
}

impl Action {
    pub fn new(asset: AssetId, kind: ActionKind, rationale: impl Into<String>) -> Self {
        Self { asset, kind, fraction: kind.fraction(), rationale: rationale.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateName {
    Decision,
    Budget,
    Consolidate,
    Crisis,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Decision => "decision",
            TemplateName::Budget => "budget",
            TemplateName::Consolidate => "consolidate",
            TemplateName::Crisis => "crisis",
        }
    }
}

const DECISION_SKELETON: &str = "\
You are {agent_name}, {agent_role}.
Date: {date}
Asset: {symbol} ({asset_class})

## Prices
{prices}

## Tool results
{tool_results}

## News
{news}

## Position
{position}

## Retrieved memories
{memories}

Decide one action for {symbol}. Allowed actions: {actions}.
Respond with a single JSON object: {{\"action\": \"<ACTION_KIND>\", \"rationale\": \"<text>\"}}
";

const BUDGET_SKELETON: &str = "\
You are {agent_name}, {agent_role}.
Date: {date}
Budget allocation conference for the next {cycle_days} days.

## Analyst reports
{reports}

## Auxiliary tools
{tools}

Estimate each analyst's expected return over the next cycle as a fraction.
Respond with a single JSON object keyed by analyst: {schema}
";

const CONSOLIDATE_SKELETON: &str = "\
You are {agent_name}, {agent_role}.
Date: {date}
Experience sharing conference, round {round}.

## Your case
{case}

## Peer cases
{peers}

State the general investment experience worth keeping, as plain text.
";

const CRISIS_SKELETON: &str = "\
You are {agent_name}, {agent_role}.
Date: {date}
Extreme market conference on {symbol}: {trigger}.

## Holdings
{holdings}

{sections}
Respect the stated section weights. Re-decide one action for {symbol}. Allowed actions: {actions}.
Respond with a single JSON object: {{\"action\": \"<ACTION_KIND>\", \"rationale\": \"<text>\"}}
";

/// Text skeleton with `{name}` placeholders; `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub skeleton: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    pub fn decision() -> Self {
        Self { name: TemplateName::Decision, skeleton: DECISION_SKELETON.into() }
    }

    pub fn budget() -> Self {
        Self { name: TemplateName::Budget, skeleton: BUDGET_SKELETON.into() }
    }

    pub fn consolidate() -> Self {
        Self { name: TemplateName::Consolidate, skeleton: CONSOLIDATE_SKELETON.into() }
    }

    pub fn crisis() -> Self {
        Self { name: TemplateName::Crisis, skeleton: CRISIS_SKELETON.into() }
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>> {
        let s = self.skeleton.as_str();
        let b = s.as_bytes();
        let mut out = Vec::new();
        let (mut i, mut start) = (0, 0);
        let bad = |offset| PolicyError::Skeleton { template: self.name.as_str(), offset };
        while i < b.len() {
            match b[i] {
                b'{' if b.get(i + 1) == Some(&b'{') => {
                    out.push(Piece::Text(&s[start..=i]));
                    i += 2;
                    start = i;
                }
                b'}' if b.get(i + 1) == Some(&b'}') => {
                    out.push(Piece::Text(&s[start..=i]));
                    i += 2;
                    start = i;
                }
                b'{' => {
                    let end = s[i + 1..].find('}').map(|e| e + i + 1).ok_or_else(|| bad(i))?;
                    let name = &s[i + 1..end];
                    if name.is_empty() || !name.bytes().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_') {
                        return Err(bad(i));
                    }
                    out.push(Piece::Text(&s[start..i]));
                    out.push(Piece::Slot(name));
                    i = end + 1;
                    start = i;
                }
                b'}' => return Err(bad(i)),
                _ => i += 1,
            }
        }
        out.push(Piece::Text(&s[start..]));
        Ok(out)
    }

    pub fn placeholders(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.to_string()),
                Piece::Text(_) => None,
            })
            .collect();
        names.sort();
        names.dedup();
        Ok(names)
    }

    /// Substitutes every placeholder; values are inserted verbatim.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.skeleton.len() * 2);
        for p in self.pieces()? {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(n) => out.push_str(vars.get(n).ok_or_else(|| PolicyError::Template {
                    template: self.name.as_str(),
                    placeholder: n.to_string(),
                })?),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tsm,
    Zmr,
    #[serde(rename = "mv")]
    MeanVariance,
    BuyAndHold,
    Hold,
    Llm,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Tsm => "tsm",
            BackendKind::Zmr => "zmr",
            BackendKind::MeanVariance => "mv",
            BackendKind::BuyAndHold => "buy_and_hold",
            BackendKind::Hold => "hold",
            BackendKind::Llm => "llm",
        }
    }
}

impl FromStr for BackendKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "tsm" => BackendKind::Tsm,
            "zmr" => BackendKind::Zmr,
            "mv" | "mean_variance" => BackendKind::MeanVariance,
            "buy_and_hold" | "bh" | "b&h" => BackendKind::BuyAndHold,
            "hold" => BackendKind::Hold,
            "llm" => BackendKind::Llm,
            _ => return Err(PolicyError::UnknownBackend(s.to_string())),
        })
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub name: String,
    pub role: String,
    /// `None` for the manager.
    pub asset_class: Option<AssetClass>,
    pub backend: BackendKind,
}

impl AgentProfile {
    /// Key used in manager JSON replies (`"dave"`, `"bob"`, ...).
    pub fn key(&self) -> String {
        self.name.to_lowercase()
    }
}

/// Analysts in fixed order (crypto, equity, forex) and the manager.
pub fn default_profiles(backend: BackendKind) -> (Vec<AgentProfile>, AgentProfile) {
    let a = |name: &str, role: &str, class| AgentProfile {
        name: name.into(),
        role: role.into(),
        asset_class: Some(class),
        backend,
    };
    (
        vec![
            a("Dave", "a Bitcoin analyst versed in on-chain data, regulation and adoption trends", AssetClass::Crypto),
            a("Bob", "a Dow Jones analyst versed in financial statements and earnings", AssetClass::Equity),
            a("Emily", "a forex analyst versed in macro indicators and central bank policy", AssetClass::Forex),
        ],
        AgentProfile {
            name: "Otto".into(),
            role: "the hedge fund manager responsible for portfolio risk and budget allocation".into(),
            asset_class: None,
            backend,
        },
    )
}

/// Book-keeping numbers the analyst sees about its own asset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PositionView {
    pub quantity: f64,
    pub price: f64,
    pub value: f64,
    /// Value held across the analyst's whole asset class.
    pub class_value: f64,
    /// Budget share of the class.
    pub class_budget: f64,
    /// Assets in the class.
    pub class_assets: usize,
    pub total_value: f64,
    pub cash: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub date: NaiveDate,
    pub asset: &'a AssetSnapshot,
    pub retrieved: &'a [Retrieved],
    pub position: PositionView,
}

fn fmt_num(x: f64) -> String {
    if x.abs() >= 1e-4 || x == 0.0 {
        format!("{x:.6}")
    } else {
        format!("{x:.6e}")
    }
}

fn actions_list() -> String {
    ActionKind::ALL.iter().map(|k| k.wire_name()).collect::<Vec<_>>().join(", ")
}

pub fn render_prices(a: &AssetSnapshot) -> String {
    let b = &a.bar;
    format!(
        "open {} high {} low {} close {} adj_close {} volume {}",
        fmt_num(b.open),
        fmt_num(b.high),
        fmt_num(b.low),
        fmt_num(b.close),
        fmt_num(b.adj_close),
        fmt_num(b.volume)
    )
}

pub fn render_tools(a: &AssetSnapshot) -> String {
    if a.indicators.is_empty() {
        return "(insufficient history for indicators)".into();
    }
    a.indicators.iter().map(|(k, v)| format!("- {k}: {}", fmt_num(*v))).collect::<Vec<_>>().join("\n")
}

pub fn render_news(a: &AssetSnapshot) -> String {
    if a.news.is_empty() {
        return NO_NEWS_MARKER.into();
    }
    a.news.iter().map(|n| format!("- [{}] {}", n.date, n.headline)).collect::<Vec<_>>().join("\n")
}

pub fn render_memories(retrieved: &[Retrieved]) -> String {
    if retrieved.is_empty() {
        return "(no relevant memories)".into();
    }
    retrieved
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!("{}. [{}] ({}, similarity {:.4}) {}", i + 1, r.record.timestamp, r.record.kind.code(), r.score, r.record.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_position(p: &PositionView) -> String {
    format!(
        "quantity {} value {} class value {} class budget {} portfolio value {} cash {}",
        fmt_num(p.quantity),
        fmt_num(p.value),
        fmt_num(p.class_value),
        fmt_num(p.class_budget),
        fmt_num(p.total_value),
        fmt_num(p.cash)
    )
}

fn persona_vars(profile: &AgentProfile, date: NaiveDate) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("agent_name", profile.name.clone());
    v.insert("agent_role", profile.role.clone());
    v.insert("date", date.to_string());
    v
}

/// Renders the daily decision prompt.
pub fn render_decision(profile: &AgentProfile, ctx: &DecisionContext<'_>) -> Result<String> {
    let mut v = persona_vars(profile, ctx.date);
    v.insert("symbol", ctx.asset.asset.symbol.clone());
    v.insert("asset_class", ctx.asset.asset.asset_class.to_string());
    v.insert("prices", render_prices(ctx.asset));
    v.insert("tool_results", render_tools(ctx.asset));
    v.insert("news", render_news(ctx.asset));
    v.insert("position", render_position(&ctx.position));
    v.insert("memories", render_memories(ctx.retrieved));
    v.insert("actions", actions_list());
    PromptTemplate::decision().render(&v)
}

pub fn render_budget(
    manager: &AgentProfile,
    date: NaiveDate,
    cycle_days: usize,
    reports: &str,
    tools: &str,
    analysts: &[AgentProfile],
) -> Result<String> {
    let mut v = persona_vars(manager, date);
    v.insert("cycle_days", cycle_days.to_string());
    v.insert("reports", reports.to_string());
    v.insert("tools", tools.to_string());
    let schema = analysts.iter().map(|a| format!("\"{}\": <fraction>", a.key())).collect::<Vec<_>>().join(", ");
    v.insert("schema", format!("{{{schema}}}"));
    PromptTemplate::budget().render(&v)
}

pub fn render_consolidate(profile: &AgentProfile, date: NaiveDate, round: usize, case: &str, peers: &[String]) -> Result<String> {
    let mut v = persona_vars(profile, date);
    v.insert("round", round.to_string());
    v.insert("case", case.to_string());
    v.insert(
        "peers",
        if peers.is_empty() { "(none)".into() } else { peers.iter().map(|p| format!("- {p}")).collect::<Vec<_>>().join("\n") },
    );
    PromptTemplate::consolidate().render(&v)
}

pub fn render_crisis(
    profile: &AgentProfile,
    date: NaiveDate,
    symbol: &str,
    trigger: &str,
    holdings: &str,
    sections: &str,
) -> Result<String> {
    let mut v = persona_vars(profile, date);
    v.insert("symbol", symbol.to_string());
    v.insert("trigger", trigger.to_string());
    v.insert("holdings", holdings.to_string());
    v.insert("sections", sections.to_string());
    v.insert("actions", actions_list());
    PromptTemplate::crisis().render(&v)
}

/// First JSON object embedded anywhere in `text`.
pub fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    json_objects(text).next()
}

fn json_objects(text: &str) -> impl Iterator<Item = serde_json::Map<String, Value>> + '_ {
    text.char_indices().filter(|(_, c)| *c == '{').filter_map(move |(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(m))) => Some(m),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDecision {
    pub kind: ActionKind,
    pub rationale: String,
    /// Set when the response could not be mapped and Hold was substituted.
    pub fallback: bool,
}

impl ParsedDecision {
    fn fallback() -> Self {
        Self { kind: ActionKind::Hold, rationale: FALLBACK_RATIONALE.into(), fallback: true }
    }
}

/// Maps a model response to an action. Never fails: anything unusable
/// becomes Hold with the fallback rationale.
pub fn parse_decision(text: &str) -> ParsedDecision {
    let Some(obj) = json_objects(text).find(|m| m.contains_key("action") && m.contains_key("rationale")) else {
        return ParsedDecision::fallback();
    };
    let kind = match obj.get("action").and_then(Value::as_str).map(str::parse::<ActionKind>) {
        Some(Ok(k)) => k,
        _ => return ParsedDecision::fallback(),
    };
    let rationale = match &obj["rationale"] {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    ParsedDecision { kind, rationale, fallback: false }
}

/// Retrieval query Q_t built by truncating the day's observations.
pub fn summarize_query(profile: &AgentProfile, a: &AssetSnapshot) -> String {
    let mut q = format!("{} {} {} close {}", profile.name, a.asset.symbol, a.bar.date, fmt_num(a.bar.close));
    for key in [TSM_SIGNAL, ZMR_SIGNAL, "RSI(14)", "MACD(12,26,9).hist"] {
        if let Some(v) = a.indicators.get(key) {
            q.push_str(&format!(" {key} {}", fmt_num(*v)));
        }
    }
    for n in &a.news {
        q.push_str(" | ");
        q.push_str(&n.headline);
    }
    if q.chars().count() > QUERY_MAX_CHARS {
        q = q.chars().take(QUERY_MAX_CHARS).collect();
    }
    q
}

/// Deterministic stand-ins for the baseline strategies.
#[derive(Debug, Clone, PartialEq)]
pub enum RulePolicy {
    Tsm,
    Zmr,
    MeanVariance,
    BuyAndHold,
    Hold,
    /// Fixed decisions keyed by date and symbol; unlisted entries hold.
    Scripted(Arc<BTreeMap<(NaiveDate, String), ActionKind>>),
}

impl RulePolicy {
    pub fn decide(&self, ctx: &DecisionContext<'_>) -> (ActionKind, String) {
        let ind = |k: &str| ctx.asset.indicators.get(k).copied();
        match self {
            RulePolicy::Tsm => match ind(TSM_SIGNAL) {
                Some(r) if r > 0.0 => (ActionKind::BuyAll, format!("trailing 252-day return {:+.4} is positive", r)),
                Some(r) if r < 0.0 => (ActionKind::SellAll, format!("trailing 252-day return {:+.4} is negative", r)),
                Some(_) => (ActionKind::Hold, "flat trailing return".into()),
                None => (ActionKind::Hold, "not enough history for momentum".into()),
            },
            RulePolicy::Zmr => match ind(ZMR_SIGNAL) {
                Some(z) if z > ZMR_THRESHOLD => (ActionKind::SellHalf, format!("price {z:.3} sd above its 20-day mean")),
                Some(z) if z < -ZMR_THRESHOLD => (ActionKind::BuyHalf, format!("price {:.3} sd below its 20-day mean", -z)),
                Some(z) => (ActionKind::Hold, format!("z-score {z:.3} inside band")),
                None => (ActionKind::Hold, "not enough history for z-score".into()),
            },
            RulePolicy::MeanVariance => {
                let p = &ctx.position;
                let target = p.class_budget * p.total_value / p.class_assets.max(1) as f64;
                if p.value < target * (1.0 - MV_BAND) {
                    (ActionKind::BuyAll, "below mean-variance budget target".into())
                } else if p.value > target * (1.0 + MV_BAND) {
                    (ActionKind::SellQuarter, "above mean-variance budget target".into())
                } else {
                    (ActionKind::Hold, "at mean-variance budget target".into())
                }
            }
            RulePolicy::BuyAndHold => {
                if ctx.position.quantity > 0.0 {
                    (ActionKind::Hold, "holding initial position".into())
                } else {
                    (ActionKind::BuyAll, "initial purchase".into())
                }
            }
            RulePolicy::Hold => (ActionKind::Hold, "always hold".into()),
            RulePolicy::Scripted(script) => {
                let key = (ctx.date, ctx.asset.asset.symbol.clone());
                (script.get(&key).copied().unwrap_or(ActionKind::Hold), "scripted".into())
            }
        }
    }
}

/// Chat-model policy behind the gateway.
#[derive(Debug, Clone)]
pub struct LlmPolicy {
    pub gateway: Arc<Gateway>,
    pub model: String,
    pub temperature: f64,
}

impl LlmPolicy {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway, model: DEFAULT_MODEL.into(), temperature: DEFAULT_TEMPERATURE }
    }

    /// One chat exchange. Replay errors propagate; live failures fall back
    /// to `None` after the gateway's retries.
    pub fn ask(&self, profile: &AgentProfile, prompt: &str) -> Result<Option<String>> {
        let req = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::system(format!("You are {}, {}.", profile.name, profile.role)), ChatMessage::user(prompt)],
            temperature: self.temperature,
        };
        match self.gateway.chat(&req) {
            Ok(r) => Ok(Some(r)),
            Err(e) if e.is_determinism_violation() || self.gateway.mode() == crate::gateway::CassetteMode::Replay => Err(e.into()),
            Err(e) => {
                log::warn!("{}: backend unavailable, holding: {e}", profile.name);
                Ok(None)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Rule(RulePolicy),
    Llm(LlmPolicy),
}

impl Backend {
    pub fn is_rule(&self) -> bool {
        matches!(self, Backend::Rule(_))
    }

    pub fn llm(&self) -> Option<&LlmPolicy> {
        match self {
            Backend::Llm(l) => Some(l),
            Backend::Rule(_) => None,
        }
    }

    pub fn rule(kind: BackendKind) -> Option<Self> {
        Some(Backend::Rule(match kind {
            BackendKind::Tsm => RulePolicy::Tsm,
            BackendKind::Zmr => RulePolicy::Zmr,
            BackendKind::MeanVariance => RulePolicy::MeanVariance,
            BackendKind::BuyAndHold => RulePolicy::BuyAndHold,
            BackendKind::Hold => RulePolicy::Hold,
            BackendKind::Llm => return None,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub fallback: bool,
    pub prompt: String,
    /// Raw model reply, absent for rule backends.
    pub response: Option<String>,
}

/// One decision for the snapshot's asset.
pub fn decide(backend: &Backend, profile: &AgentProfile, ctx: &DecisionContext<'_>) -> Result<Decision> {
    let prompt = render_decision(profile, ctx)?;
    let asset = ctx.asset.asset.clone();
    match backend {
        Backend::Rule(rule) => {
            let (kind, rationale) = rule.decide(ctx);
            Ok(Decision { action: Action::new(asset, kind, rationale), fallback: false, prompt, response: None })
        }
        Backend::Llm(llm) => {
            let Some(response) = llm.ask(profile, &prompt)? else {
                return Ok(Decision {
                    action: Action::new(asset, ActionKind::Hold, FALLBACK_RATIONALE),
                    fallback: true,
                    prompt,
                    response: None,
                });
            };
            let p = parse_decision(&response);
            if p.fallback {
                log::warn!("{} on {}: unparseable response, holding", profile.name, ctx.date);
            }
            Ok(Decision { action: Action::new(asset, p.kind, p.rationale), fallback: p.fallback, prompt, response: Some(response) })
        }
    }
}

/// Realized outcome of an action after the reflection horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub decided: NaiveDate,
    pub realized: NaiveDate,
    pub horizon_days: usize,
    /// Asset price change over the horizon, as a fraction.
    pub realized_return: f64,
    /// Position quantity at decision close times the price change.
    pub pnl: f64,
    pub context: String,
}

pub fn signed_percent(r: f64) -> String {
    let pct = r * 100.0;
    let pct = if pct.abs() < 0.005 { 0.0 } else { pct };
    format!("{pct:+.2}%")
}

pub fn reflection_text(profile: &AgentProfile, action: &Action, outcome: &Outcome) -> String {
    format!(
        "{} decided {} on {} ({}): {}. Context: {}. Outcome: {} over {} trading days to {}, P&L {:.2}.",
        profile.name,
        action.kind,
        action.asset.symbol,
        outcome.decided,
        action.rationale,
        outcome.context,
        signed_percent(outcome.realized_return),
        outcome.horizon_days,
        outcome.realized,
        outcome.pnl
    )
}

/// Builds the investment-reflection record for `action`.
pub fn reflect(profile: &AgentProfile, action: &Action, outcome: &Outcome, embedder: &dyn Embedder) -> Result<NewRecord> {
    let text = reflection_text(profile, action, outcome);
    let emb = embedder.embed(&text)?;
    Ok(NewRecord::new(outcome.realized, text, emb)
        .with_meta("agent", &profile.name)
        .with_meta("symbol", &action.asset.symbol)
        .with_meta("action", action.kind)
        .with_meta("decided", outcome.decided)
        .with_meta("return", format!("{:.10}", outcome.realized_return))
        .with_meta("pnl", format!("{:.10}", outcome.pnl)))
}

//! Budget allocation, experience sharing and extreme market conferences.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::allocator::{self, AllocError, AllocationProblem, SolverOptions, Weights};
use crate::market::{
    cumulative_amplitude_3d, daily_amplitude_with, AmplitudeMode, AssetClass, AssetId, Bar, Dataset, ReturnSeries,
};
use crate::memory::{Embedder, MemoryError, MemoryRecord, MemoryStore, NewRecord};
use crate::policy::{
    self, first_json_object, parse_decision, render_budget, render_consolidate, render_crisis, signed_percent, Action,
    ActionKind, AgentProfile, Backend, PolicyError, PositionView,
};

pub const DAILY_THRESHOLD: f64 = 0.05;
pub const THREE_DAY_THRESHOLD: f64 = 0.10;
pub const DEFAULT_LAMBDA3: f64 = 0.5;
pub const DEFAULT_ESC_ROUNDS: usize = 1;
pub const LOG_FILE: &str = "logs/conferences.jsonl";

#[derive(Debug, Error)]
pub enum ConferenceError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("lambda3 {0} outside [0, 1]")]
    Lambda3(f64),
}

pub type Result<T, E = ConferenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConferenceKind {
    Bac,
    Esc,
    Emc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub agent: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoProvenance {
    LlmParsed,
    RuleEstimated,
    /// Too little history: previous weights kept.
    Carried,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConferenceOutcome {
    Weights {
        /// Budget per asset class in (crypto, equity, forex) order.
        weights: Vec<f64>,
        rho: Vec<f64>,
        provenance: RhoProvenance,
        objective: Option<f64>,
        note: Option<String>,
    },
    Memories {
        ids: Vec<String>,
        note: Option<String>,
    },
    Actions {
        actions: Vec<Action>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConferenceLog {
    pub date: NaiveDate,
    pub kind: ConferenceKind,
    pub transcript: Vec<Exchange>,
    pub outcome: ConferenceOutcome,
}

/// Nominal conference dates `start + k·cycle` up to `end`.
pub fn bac_schedule(start: NaiveDate, end: NaiveDate, cycle_days: u64) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = start;
    while d <= end {
        out.push(d);
        d = d + Days::new(cycle_days.max(1));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Daily,
    ThreeDay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub asset: AssetId,
    pub kind: TriggerKind,
    pub amplitude: f64,
    /// Signed close-to-close move over the trigger's window.
    pub change: f64,
}

/// Triggers firing on the last bar of `bars`.
pub fn triggers_on(bars: &[Bar], class: AssetClass, mode: AmplitudeMode) -> Vec<(TriggerKind, f64, f64)> {
    let mut out = Vec::new();
    let px = |b: &Bar| b.valuation_price(class);
    let n = bars.len();
    if let Ok(a) = daily_amplitude_with(bars, mode) {
        if a > DAILY_THRESHOLD {
            out.push((TriggerKind::Daily, a, px(&bars[n - 1]) / px(&bars[n - 2]) - 1.0));
        }
    }
    if let Ok(a) = cumulative_amplitude_3d(bars) {
        if a > THREE_DAY_THRESHOLD {
            out.push((TriggerKind::ThreeDay, a, bars[n - 1].close / bars[n - 4].close - 1.0));
        }
    }
    out
}

/// One entry per asset per firing trigger, for assets trading on `date`.
pub fn detect_extreme(ds: &Dataset, date: NaiveDate, mode: AmplitudeMode) -> Vec<Trigger> {
    let mut out = Vec::new();
    for (idx, s) in ds.series().iter().enumerate() {
        if ds.bar_on(idx, date).is_none() {
            continue;
        }
        for (kind, amplitude, change) in triggers_on(ds.bars_upto(idx, date), s.asset.asset_class, mode) {
            out.push(Trigger { asset: s.asset.clone(), kind, amplitude, change });
        }
    }
    out
}

/// Equal-weight daily return series per asset class, gated at `date`.
pub fn class_returns(ds: &Dataset, date: NaiveDate) -> Vec<(AssetClass, ReturnSeries)> {
    let mut out = Vec::new();
    for class in AssetClass::ALL {
        let members: Vec<ReturnSeries> = ds
            .series()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.asset.asset_class == class)
            .map(|(i, s)| ReturnSeries::from_bars(&s.asset, ds.bars_upto(i, date)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut dates: BTreeSet<NaiveDate> = members[0].dates.iter().copied().collect();
        for m in &members[1..] {
            let other: BTreeSet<NaiveDate> = m.dates.iter().copied().collect();
            dates = dates.intersection(&other).copied().collect();
        }
        let maps: Vec<BTreeMap<NaiveDate, f64>> =
            members.iter().map(|m| m.dates.iter().copied().zip(m.returns.iter().copied()).collect()).collect();
        let dates: Vec<NaiveDate> = dates.into_iter().collect();
        let returns = dates.iter().map(|d| maps.iter().map(|m| m[d]).sum::<f64>() / maps.len() as f64).collect();
        let asset = AssetId { symbol: class.to_string(), asset_class: class };
        out.push((class, ReturnSeries { asset, dates, returns }));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystReport {
    pub agent: AgentProfile,
    /// Class P&L over the cycle divided by portfolio value at cycle start.
    pub cycle_return: f64,
    pub profit_summary: String,
    pub budget_request: String,
}

impl AnalystReport {
    pub fn new(agent: &AgentProfile, cycle_return: f64, class_value: f64, trailing_mean: Option<f64>) -> Self {
        let profit_summary =
            format!("{} cycle return {} with class holdings worth {:.2}", agent.name, signed_percent(cycle_return), class_value);
        let budget_request = match trailing_mean {
            Some(m) if m > 0.0 => format!("{} asks for more budget: trailing mean daily return {:+.6}", agent.name, m),
            Some(m) => format!("{} asks for less budget: trailing mean daily return {:+.6}", agent.name, m),
            None => format!("{} has too little history to justify a change", agent.name),
        };
        Self { agent: agent.clone(), cycle_return, profit_summary, budget_request }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedReturnVector {
    pub rho: Vec<f64>,
    pub provenance: RhoProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub window: usize,
    pub cycle_days: usize,
    pub solver: SolverOptions,
}

impl Default for BacParams {
    fn default() -> Self {
        Self {
            lambda1: allocator::DEFAULT_LAMBDA,
            lambda2: allocator::DEFAULT_LAMBDA,
            alpha: allocator::DEFAULT_ALPHA,
            window: allocator::DEFAULT_WINDOW,
            cycle_days: allocator::DEFAULT_CYCLE_DAYS,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacOutcome {
    /// Budget per asset class in `AssetClass::ALL` order.
    pub budgets: [f64; 3],
    pub rho: ExpectedReturnVector,
    pub log: ConferenceLog,
}

fn parse_rho(text: &str, analysts: &[&AgentProfile]) -> Option<Vec<f64>> {
    let obj = first_json_object(text)?;
    analysts
        .iter()
        .map(|a| obj.get(&a.key()).and_then(Value::as_f64).filter(|x| x.is_finite()))
        .collect()
}

/// Budget allocation conference. `analysts` are in fixed order; only
/// classes with data take part, the rest get zero budget.
pub fn run_bac(
    ds: &Dataset,
    date: NaiveDate,
    reports: &[AnalystReport],
    manager: &AgentProfile,
    backend: &Backend,
    params: &BacParams,
    previous: [f64; 3],
) -> Result<BacOutcome> {
    let classes = class_returns(ds, date);
    let series: Vec<ReturnSeries> = classes.iter().map(|(_, s)| s.clone()).collect();
    let carried = |note: String, transcript: Vec<Exchange>| BacOutcome {
        budgets: previous,
        rho: ExpectedReturnVector { rho: vec![], provenance: RhoProvenance::Carried },
        log: ConferenceLog {
            date,
            kind: ConferenceKind::Bac,
            transcript,
            outcome: ConferenceOutcome::Weights {
                weights: previous.to_vec(),
                rho: vec![],
                provenance: RhoProvenance::Carried,
                objective: None,
                note: Some(note),
            },
        },
    };
    let est = match allocator::estimate_inputs(&series, params.window, params.cycle_days) {
        Ok(e) => e,
        Err(e @ AllocError::InsufficientHistory { .. }) | Err(e @ AllocError::Dimension(_)) => {
            log::info!("BAC {date}: keeping previous budgets ({e})");
            return Ok(carried(e.to_string(), vec![]));
        }
        Err(e) => return Err(e.into()),
    };

    let participants: Vec<&AgentProfile> = classes
        .iter()
        .filter_map(|(c, _)| reports.iter().map(|r| &r.agent).find(|a| a.asset_class == Some(*c)))
        .collect();
    let mut transcript = Vec::new();
    let mut rho = ExpectedReturnVector { rho: est.rho.clone(), provenance: RhoProvenance::RuleEstimated };
    if let (Some(llm), true) = (backend.llm(), participants.len() == classes.len()) {
        let report_text = reports
            .iter()
            .map(|r| format!("- {}\n  {}", r.profit_summary, r.budget_request))
            .collect::<Vec<_>>()
            .join("\n");
        let tools = classes
            .iter()
            .enumerate()
            .map(|(i, (c, _))| {
                format!("- {c}: rule-estimated cycle return {:+.6}, daily volatility {:.6}", est.rho[i], est.cov[i][i].sqrt())
            })
            .collect::<Vec<_>>()
            .join("\n");
        let owned: Vec<AgentProfile> = participants.iter().map(|p| (*p).clone()).collect();
        let prompt = render_budget(manager, date, params.cycle_days, &report_text, &tools, &owned)?;
        if let Some(resp) = llm.ask(manager, &prompt)? {
            match parse_rho(&resp, &participants) {
                Some(v) => rho = ExpectedReturnVector { rho: v, provenance: RhoProvenance::LlmParsed },
                None => log::warn!("BAC {date}: unparseable expected returns, using rule estimate"),
            }
            transcript.push(Exchange { agent: manager.name.clone(), prompt, response: resp });
        }
    }

    let problem = AllocationProblem {
        rho: rho.rho.clone(),
        cov: est.cov,
        history: est.history,
        lambda1: params.lambda1,
        lambda2: params.lambda2,
        alpha: params.alpha,
    };
    let (omega, objective, note) = match allocator::optimize_with(&problem, &params.solver) {
        Ok(a) => (a.weights.omega, Some(a.terms.objective), None),
        Err(AllocError::NonConvergence { .. }) => {
            log::warn!("BAC {date}: solver did not converge, keeping previous budgets");
            return Ok(carried("solver did not converge".into(), transcript));
        }
        Err(AllocError::NotPsd(_) | AllocError::NotSymmetric(..)) => {
            let w = Weights::uniform(problem.dim());
            (w.omega, None, Some("covariance unusable, uniform budgets".to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut budgets = [0.0; 3];
    for ((c, _), w) in classes.iter().zip(&omega) {
        budgets[c.index()] = *w;
    }
    Ok(BacOutcome {
        budgets,
        rho: rho.clone(),
        log: ConferenceLog {
            date,
            kind: ConferenceKind::Bac,
            transcript,
            outcome: ConferenceOutcome::Weights {
                weights: budgets.to_vec(),
                rho: rho.rho,
                provenance: rho.provenance,
                objective,
                note,
            },
        },
    })
}

fn pnl_of(r: &MemoryRecord) -> f64 {
    r.metadata.get("pnl").and_then(|s| s.parse::<f64>().ok()).unwrap_or(0.0)
}

/// Reflections ranked for case selection: largest |P&L| first, then the
/// newer record, then the smaller id. In-cycle records are preferred.
pub fn ranked_cases(ir: &MemoryStore, cycle_start: NaiveDate, date: NaiveDate) -> Vec<&MemoryRecord> {
    let visible: Vec<&MemoryRecord> = ir.records().iter().filter(|r| r.timestamp <= date).collect();
    let in_cycle: Vec<&MemoryRecord> = visible.iter().copied().filter(|r| r.timestamp > cycle_start).collect();
    let mut pool = if in_cycle.is_empty() { visible } else { in_cycle };
    pool.sort_by(|a, b| {
        pnl_of(b)
            .abs()
            .total_cmp(&pnl_of(a).abs())
            .then_with(|| b.timestamp.cmp(&a.timestamp))
            .then_with(|| a.id.cmp(&b.id))
    });
    pool
}

/// Rule-mode consolidation: the case followed by distinct peer cases.
pub fn consolidate_rule(case: &str, peers: &[String]) -> String {
    let mut seen = BTreeSet::new();
    seen.insert(case.to_string());
    let mut out = case.to_string();
    for p in peers {
        if seen.insert(p.clone()) {
            out.push_str(" || peer: ");
            out.push_str(p);
        }
    }
    out
}

/// Experience sharing conference. Each participating agent contributes one
/// general-experience record per round to the shared store.
#[allow(clippy::too_many_arguments)]
pub fn run_esc(
    date: NaiveDate,
    cycle_start: NaiveDate,
    agents: &[(&AgentProfile, &MemoryStore)],
    shared_ge: &mut MemoryStore,
    rounds: usize,
    backend: &Backend,
    embedder: &dyn Embedder,
) -> Result<(Vec<String>, ConferenceLog)> {
    let cases: Vec<(&AgentProfile, Vec<&MemoryRecord>)> = agents
        .iter()
        .map(|(p, ir)| (*p, ranked_cases(ir, cycle_start, date)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let mut transcript = Vec::new();
    let mut pending: Vec<NewRecord> = Vec::new();
    let mut note = None;
    'rounds: for round in 1..=rounds.max(1) {
        let picks: Vec<&MemoryRecord> = cases.iter().map(|(_, c)| c[(round - 1) % c.len()]).collect();
        for (i, (profile, _)) in cases.iter().enumerate() {
            let case = &picks[i].text;
            let peers: Vec<String> =
                picks.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.text.clone()).collect();
            let text = match backend.llm() {
                None => consolidate_rule(case, &peers),
                Some(llm) => {
                    let prompt = render_consolidate(profile, date, round, case, &peers)?;
                    match llm.ask(profile, &prompt)? {
                        Some(resp) => {
                            transcript.push(Exchange { agent: profile.name.clone(), prompt, response: resp.clone() });
                            let t = resp.trim();
                            if t.is_empty() { consolidate_rule(case, &peers) } else { t.to_string() }
                        }
                        None => {
                            log::warn!("ESC {date}: backend unavailable, conference skipped");
                            pending.clear();
                            note = Some("skipped: backend unavailable".to_string());
                            break 'rounds;
                        }
                    }
                }
            };
            let emb = embedder.embed(&text)?;
            pending.push(
                NewRecord::new(date, text, emb)
                    .with_meta("agent", &profile.name)
                    .with_meta("round", round)
                    .with_meta("case", &picks[i].id),
            );
        }
    }
    let mut ids = Vec::with_capacity(pending.len());
    for rec in pending {
        ids.push(shared_ge.insert(rec, date)?);
    }
    let log = ConferenceLog {
        date,
        kind: ConferenceKind::Esc,
        transcript,
        outcome: ConferenceOutcome::Memories { ids: ids.clone(), note },
    };
    Ok((ids, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrisisBundle {
    pub crisis_agent: AgentProfile,
    pub asset: AssetId,
    pub triggers: Vec<Trigger>,
    pub holdings: String,
    /// S_C
    pub cause: String,
    pub plan: String,
    /// S_B
    pub manager_suggestion: String,
    pub manager_action: ActionKind,
    /// S_E
    pub peer_suggestions: Vec<String>,
    pub peer_actions: Vec<ActionKind>,
    pub lambda3: f64,
}

fn trigger_label(t: &Trigger) -> String {
    let what = match t.kind {
        TriggerKind::Daily => "daily amplitude",
        TriggerKind::ThreeDay => "three-day amplitude",
    };
    format!("{what} {:.2}% (move {})", t.amplitude * 100.0, signed_percent(t.change))
}

/// Assembles the crisis bundle from rule-generated suggestions.
pub fn build_crisis_bundle(
    agent: &AgentProfile,
    manager: &AgentProfile,
    peers: &[&AgentProfile],
    triggers: &[Trigger],
    position: &PositionView,
    planned: &Action,
    lambda3: f64,
) -> Result<CrisisBundle> {
    if !(0.0..=1.0).contains(&lambda3) {
        return Err(ConferenceError::Lambda3(lambda3));
    }
    let asset = triggers.first().map(|t| t.asset.clone()).unwrap_or_else(|| planned.asset.clone());
    let change = triggers
        .iter()
        .find(|t| t.kind == TriggerKind::ThreeDay)
        .or(triggers.first())
        .map(|t| t.change)
        .unwrap_or(0.0);
    let share = |v: f64| if position.total_value > 0.0 { v / position.total_value * 100.0 } else { 0.0 };
    let holdings = format!(
        "{} quantity {:.6} worth {:.2} ({:.1}% of portfolio); cash {:.2} ({:.1}%)",
        asset.symbol,
        position.quantity,
        position.value,
        share(position.value),
        position.cash,
        share(position.cash)
    );
    let cause = format!(
        "{} reports {} on {}",
        agent.name,
        triggers.iter().map(trigger_label).collect::<Vec<_>>().join(" and "),
        asset.symbol
    );
    let plan = format!("{} planned {}: {}", agent.name, planned.kind, planned.rationale);
    let (manager_action, manager_suggestion) = if change < 0.0 {
        (ActionKind::SellHalf, format!("{}: cut exposure to limit further losses (SELL_HALF)", manager.name))
    } else {
        (ActionKind::SellQuarter, format!("{}: lock in part of the surge (SELL_QUARTER)", manager.name))
    };
    let peer_suggestions =
        peers.iter().map(|p| format!("{}: avoid panic trading and keep the position steady (HOLD)", p.name)).collect();
    let peer_actions = vec![ActionKind::Hold; peers.len()];
    Ok(CrisisBundle {
        crisis_agent: agent.clone(),
        asset,
        triggers: triggers.to_vec(),
        holdings,
        cause,
        plan,
        manager_suggestion,
        manager_action,
        peer_suggestions,
        peer_actions,
        lambda3,
    })
}

/// Crisis context: the manager/crisis-agent section weighted `1 − λ3` and
/// the peer section weighted `λ3`; a zero-weight section is left out.
pub fn crisis_sections(b: &CrisisBundle) -> String {
    let mut out = String::new();
    if b.lambda3 < 1.0 {
        out.push_str(&format!(
            "## Manager and crisis analyst (weight: {:.2})\nCause: {}\nPlan: {}\nManager suggestion: {}\n\n",
            1.0 - b.lambda3,
            b.cause,
            b.plan,
            b.manager_suggestion
        ));
    }
    if b.lambda3 > 0.0 {
        out.push_str(&format!("## Peer suggestions (weight: {:.2})\n", b.lambda3));
        if b.peer_suggestions.is_empty() {
            out.push_str("(none)\n");
        }
        for s in &b.peer_suggestions {
            out.push_str(&format!("- {s}\n"));
        }
        out.push('\n');
    }
    out
}

pub fn render_crisis_prompt(b: &CrisisBundle, date: NaiveDate) -> Result<String> {
    let trigger = b.triggers.iter().map(trigger_label).collect::<Vec<_>>().join(", ");
    Ok(render_crisis(&b.crisis_agent, date, &b.asset.symbol, &trigger, &b.holdings, &crisis_sections(b))?)
}

/// Weighted vote over the suggested actions; ties go to the manager's.
pub fn crisis_vote(b: &CrisisBundle) -> ActionKind {
    let mut score: BTreeMap<ActionKind, f64> = BTreeMap::new();
    *score.entry(b.manager_action).or_default() += 1.0 - b.lambda3;
    if !b.peer_actions.is_empty() {
        let w = b.lambda3 / b.peer_actions.len() as f64;
        for a in &b.peer_actions {
            *score.entry(*a).or_default() += w;
        }
    }
    let best = score.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if score[&b.manager_action] >= best {
        b.manager_action
    } else {
        score.iter().find(|(_, v)| **v >= best).map(|(k, _)| *k).unwrap_or(b.manager_action)
    }
}

/// Extreme market conference: the crisis agent re-decides its asset.
pub fn run_emc(date: NaiveDate, bundle: &CrisisBundle, backend: &Backend) -> Result<(Action, ConferenceLog)> {
    let prompt = render_crisis_prompt(bundle, date)?;
    let mut transcript = Vec::new();
    let action = match backend {
        Backend::Rule(_) => {
            let kind = crisis_vote(bundle);
            transcript.push(Exchange {
                agent: bundle.crisis_agent.name.clone(),
                prompt,
                response: format!("{{\"action\": \"{kind}\", \"rationale\": \"weighted vote of conference suggestions\"}}"),
            });
            Action::new(bundle.asset.clone(), kind, "weighted vote of conference suggestions")
        }
        Backend::Llm(llm) => match llm.ask(&bundle.crisis_agent, &prompt)? {
            Some(resp) => {
                let p = parse_decision(&resp);
                transcript.push(Exchange { agent: bundle.crisis_agent.name.clone(), prompt, response: resp });
                Action::new(bundle.asset.clone(), p.kind, p.rationale)
            }
            None => Action::new(bundle.asset.clone(), ActionKind::Hold, policy::FALLBACK_RATIONALE),
        },
    };
    let log = ConferenceLog {
        date,
        kind: ConferenceKind::Emc,
        transcript,
        outcome: ConferenceOutcome::Actions { actions: vec![action.clone()] },
    };
    Ok((action, log))
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use hedgeflow::allocator::{cvar_historical, optimize, var_historical, AllocationProblem};
use hedgeflow::conferences::detect_extreme;
use hedgeflow::engine::{Engine, RunArtifacts, RunConfig};
use hedgeflow::gateway::{Cassette, CassetteMode, FnTransport, Gateway, GatewayConfig, TransportError};
use hedgeflow::market::{AmplitudeMode, Dataset, NewsItem};
use hedgeflow::memory::{retrieve, MemoryKind, MemoryStore, NewRecord, Query, RetrievalMode};
use hedgeflow::metrics::{self, annual_return_rate, effective_bets_cov, entropy, max_drawdown};
use hedgeflow::policy::BackendKind;
use hedgeflow::synth::{planted_extremes, three_asset_series, write_dir};
use hedgeflow::Execution;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn arr_tr_consistency() -> Check {
    let rows = [("TR 4.0534", 4.0534, 0.7160), ("TR 2.2199", 2.2199, 0.4767)];
    let mut got = Vec::new();
    for (name, tr, arr) in rows {
        let a = annual_return_rate(tr, 3.0).map_err(|e| e.to_string())?;
        ensure((a - arr).abs() <= 5e-4, || format!("{name}: ARR {a:.6} vs {arr}"))?;
        got.push(format!("{name} {a:.4}"));
    }
    Ok(got.join(", "))
}

/// Independent objective: ρ·ω − λ1·sqrt(ωᵀΣω) − λ2·(mean of the ⌊(1−α)n⌋ worst losses).
fn oracle_objective(p: &AllocationProblem, w: &[f64]) -> f64 {
    let n = w.len();
    let etr: f64 = (0..n).map(|i| p.rho[i] * w[i]).sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += w[i] * w[j] * p.cov[i][j];
        }
    }
    let mut losses: Vec<f64> = p.history.iter().map(|r| -(0..n).map(|i| r[i] * w[i]).sum::<f64>()).collect();
    losses.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (((1.0 - p.alpha) * losses.len() as f64) + 1e-9).floor().max(1.0) as usize;
    let cvar = losses[..k].iter().sum::<f64>() / k as f64;
    etr - p.lambda1 * q.max(0.0).sqrt() - p.lambda2 * cvar
}

fn random_problem(rng: &mut ChaCha8Rng) -> AllocationProblem {
    let n = 3;
    let days = 252;
    let vols: Vec<f64> = (0..n).map(|_| rng.random_range(0.004..0.04)).collect();
    let history: Vec<Vec<f64>> = (0..days)
        .map(|_| {
            let common: f64 = rng.random_range(-1.0..1.0);
            (0..n).map(|i| vols[i] * (0.6 * common + rng.random_range(-1.0..1.0)) + 0.0004).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..n).map(|i| history.iter().map(|r| r[i]).sum::<f64>() / days as f64).collect();
    let cov = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| history.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (days as f64 - 1.0))
                .collect()
        })
        .collect();
    AllocationProblem {
        rho: (0..n).map(|_| rng.random_range(-0.03..0.09)).collect(),
        cov,
        history,
        lambda1: rng.random_range(0.0..2.0),
        lambda2: rng.random_range(0.0..2.0),
        alpha: 0.95,
    }
}

fn allocator_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..50 {
        let p = random_problem(&mut rng);
        let mut grid_best = f64::NEG_INFINITY;
        for a in 0..=100 {
            for b in 0..=100 - a {
                let w = [a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0];
                grid_best = grid_best.max(oracle_objective(&p, &w));
            }
        }
        let alloc = optimize(&p).map_err(|e| format!("trial {trial}: {e}"))?;
        let w = &alloc.weights.omega;
        ensure(alloc.weights.is_feasible(), || format!("trial {trial}: infeasible {w:?}"))?;
        let obj = oracle_objective(&p, w);
        ensure((obj - alloc.terms.objective).abs() <= 1e-12, || format!("trial {trial}: reported objective differs"))?;
        let gap = grid_best - obj;
        worst = worst.max(gap);
        ensure(gap <= 1e-6, || format!("trial {trial}: optimizer {obj:.9} below grid {grid_best:.9}"))?;
    }
    Ok(format!("50 problems, worst grid-minus-optimizer gap {worst:.2e}"))
}

fn cvar_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let r: Vec<f64> = (0..100).map(|_| rng.random_range(-0.05..0.05)).collect();
        let mut losses: Vec<f64> = r.iter().map(|x| -x).collect();
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = losses[95..].iter().sum::<f64>() / 5.0;
        let c = cvar_historical(&r, 0.95).map_err(|e| e.to_string())?;
        let v = var_historical(&r, 0.95).map_err(|e| e.to_string())?;
        ensure(c == oracle, || format!("trial {trial}: CVaR {c} vs oracle {oracle}"))?;
        ensure(c >= v, || format!("trial {trial}: CVaR {c} < VaR {v}"))?;
    }
    Ok("20 trials × 100 samples exact, CVaR ≥ VaR".into())
}

fn emc_triggers() -> Check {
    let (ds, planted) = planted_extremes(7, 500, 12);
    let mut fired = std::collections::BTreeSet::new();
    for date in ds.calendar() {
        for t in detect_extreme(&ds, *date, AmplitudeMode::IntradayRange) {
            fired.insert((*date, t.kind));
        }
    }
    ensure(planted.len() == 12, || format!("planted {} events", planted.len()))?;
    ensure(fired == planted, || {
        let extra: Vec<_> = fired.difference(&planted).collect();
        let missed: Vec<_> = planted.difference(&fired).collect();
        format!("extra {extra:?}, missed {missed:?}")
    })?;
    Ok("12 planted, 12 fired, 0 spurious".into())
}

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let dates: Vec<NaiveDate> = (0..n).map(|i| d("2021-01-01") + Days::new(i)).collect();
    let mut equity = vec![100.0];
    for _ in 1..n {
        equity.push(equity.last().unwrap() * (1.0 + rng.random_range(-0.03..0.035)));
    }
    let weights = vec![vec![0.5, 0.5]; n as usize];
    let rets = vec![vec![0.0, 0.0]; n as usize];
    let m = metrics::evaluate(&metrics::EvaluationInput {
        dates: &dates,
        equity: &equity,
        weights: &weights,
        asset_returns: &rets,
        cycle_days: 30,
        risk_free: 0.0,
    })
    .map_err(|e| e.to_string())?;
    let cr = m.cr.ok_or("CR undefined")?;
    ensure((cr * m.mdd - m.arr).abs() <= 1e-12, || format!("CR×MDD {} vs ARR {}", cr * m.mdd, m.arr))?;
    let compounded = equity.windows(2).fold(1.0, |acc, w| acc * (w[1] / w[0])) - 1.0;
    ensure((compounded - m.tr).abs() <= 1e-9, || format!("Π(1+r)−1 {compounded} vs TR {}", m.tr))?;
    let mdd = max_drawdown(&[100.0, 120.0, 90.0, 110.0]);
    ensure((mdd - 0.25).abs() <= 1e-15, || format!("MDD {mdd}"))?;
    let ent = entropy(&vec![vec![1.0]; 50]);
    ensure(ent == 0.0, || format!("ENT single asset {ent}"))?;
    for k in 1..=6usize {
        let cov = nalgebra::DMatrix::<f64>::identity(k, k) * 0.0004;
        let enb = effective_bets_cov(&vec![1.0 / k as f64; k], &cov).map_err(|e| e.to_string())?;
        ensure((enb - k as f64).abs() <= 1e-6, || format!("ENB for {k} assets {enb}"))?;
    }
    Ok("CR×MDD=ARR, Π(1+r)−1=TR, MDD=0.25, ENT=0, ENB=n".into())
}

fn run_to(cfg: &RunConfig, dir: &Path) -> Result<RunArtifacts, String> {
    let art = Engine::from_config(cfg).and_then(|e| e.run()).map_err(|e| e.to_string())?;
    art.write(dir).map_err(|e| e.to_string())?;
    Ok(art)
}

const COMPARED: [&str; 3] = ["metrics.json", "equity.csv", "fills.csv"];

fn same_bytes(a: &Path, b: &Path) -> Result<(), String> {
    for f in COMPARED {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(())
}

/// Stand-in chat model: deterministic function of the prompt.
fn fake_model(url: &str, body: &Value) -> Result<Value, TransportError> {
    if !url.ends_with("chat/completions") {
        return Err(TransportError(format!("unexpected endpoint {url}")));
    }
    let prompt = body["messages"].as_array().and_then(|m| m.last()).and_then(|m| m["content"].as_str()).unwrap_or("");
    let h = prompt.bytes().fold(0u32, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u32));
    let actions = ["BUY_HALF", "HOLD", "SELL_QUARTER", "BUY_QUARTER", "HOLD", "SELL_HALF"];
    let reply = json!({
        "action": actions[(h % actions.len() as u32) as usize],
        "rationale": format!("signal {}", h % 97),
        "dave": 0.01 * (h % 5) as f64,
        "bob": 0.02,
        "emily": 0.005,
    });
    Ok(json!({
        "choices": [{"message": {"content": reply.to_string()}}],
        "usage": {"prompt_tokens": prompt.len() / 4, "completion_tokens": 40}
    }))
}

fn determinism() -> Check {
    let cfg = RunConfig::from_file(&fixtures().join("sample_config.json")).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let budget = Duration::from_secs(10);
    let t = Instant::now();
    let a = run_to(&cfg, &tmp.path().join("a"))?;
    let rule_time = t.elapsed();
    ensure(rule_time < budget, || format!("rule run took {rule_time:?}"))?;
    run_to(&cfg, &tmp.path().join("b"))?;
    same_bytes(&tmp.path().join("a"), &tmp.path().join("b"))?;
    ensure(!a.fills.is_empty(), || "rule run produced no fills".into())?;

    let mut llm = cfg.clone();
    llm.policy_backend = BackendKind::Llm;
    llm.end = d("2021-03-31");
    let ds = Dataset::load_dir(&llm.data_dir).map_err(|e| e.to_string())?;
    let transport = Arc::new(FnTransport::new(fake_model));
    let config = GatewayConfig { base_url: Some("http://recorder.invalid/v1".into()), ..GatewayConfig::default() };
    let recorder =
        Arc::new(Gateway::new(config, Some(Box::new(transport.clone())), Cassette::in_memory(CassetteMode::Record, vec![])));
    let t = Instant::now();
    let rec = Engine::with_gateway(llm.clone(), ds.clone(), recorder.clone())
        .and_then(|e| e.run())
        .map_err(|e| e.to_string())?;
    ensure(t.elapsed() < budget, || format!("record run took {:?}", t.elapsed()))?;
    rec.write(&tmp.path().join("rec")).map_err(|e| e.to_string())?;
    let entries = recorder.cassette_entries();
    ensure(transport.calls() > 0, || "recording made no calls".into())?;

    let player = Arc::new(Gateway::replay(entries.clone()));
    let t = Instant::now();
    let rep =
        Engine::with_gateway(llm, ds, player.clone()).and_then(|e| e.run()).map_err(|e| e.to_string())?;
    ensure(t.elapsed() < budget, || format!("replay run took {:?}", t.elapsed()))?;
    rep.write(&tmp.path().join("rep")).map_err(|e| e.to_string())?;
    same_bytes(&tmp.path().join("rec"), &tmp.path().join("rep"))?;
    ensure(player.network_calls() == 0, || format!("replay made {} network calls", player.network_calls()))?;
    ensure(player.remaining() == 0, || format!("{} cassette entries unused", player.remaining()))?;
    Ok(format!(
        "rule run {rule_time:.2?} identical twice; LLM replay of {} exchanges identical, 0 network calls",
        entries.len()
    ))
}

const SENTINEL: &str = "SENTINEL-7f3a: exchange halts withdrawals";

fn temporal_gating() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let mut series = three_asset_series(2021, d("2020-01-01"), d("2021-04-30"), false);
    let reveal = d("2021-03-15");
    let btc = series.iter_mut().find(|s| s.asset.symbol == "BTC").unwrap();
    btc.news.push(NewsItem { date: reveal, asset: btc.asset.clone(), headline: SENTINEL.into() });
    write_dir(&data, &series).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::new(&data, d("2020-01-01"), d("2021-04-30"), BackendKind::Tsm);
    cfg.test_start = Some(d("2021-01-01"));
    cfg.log_prompts = true;
    cfg.bac_cycle_days = 15;
    let t = Instant::now();
    let art = Engine::from_config(&cfg).and_then(|e| e.run()).map_err(|e| e.to_string())?;
    ensure(t.elapsed() < Duration::from_secs(10), || format!("run took {:?}", t.elapsed()))?;
    let mut scanned = 0;
    let mut seen_after = false;
    for dl in &art.decisions {
        let p = dl.prompt.as_deref().ok_or("prompt not logged")?;
        scanned += 1;
        if p.contains("SENTINEL-7f3a") {
            ensure(dl.date >= reveal, || format!("sentinel leaked into {} prompt on {}", dl.agent, dl.date))?;
            seen_after = true;
        }
    }
    for c in &art.conferences {
        for ex in &c.transcript {
            scanned += 1;
            let leaked = ex.prompt.contains("SENTINEL-7f3a") || ex.response.contains("SENTINEL-7f3a");
            ensure(!leaked || c.date >= reveal, || format!("sentinel leaked into conference on {}", c.date))?;
        }
    }
    for store in &art.memory {
        for r in store.records() {
            ensure(!r.text.contains("SENTINEL-7f3a") || r.timestamp >= reveal, || format!("sentinel in memory at {}", r.timestamp))?;
        }
    }
    ensure(seen_after, || "sentinel never surfaced, scan proves nothing".into())?;
    Ok(format!("{scanned} transcripts scanned, sentinel absent before {reveal}"))
}

fn total_return(dir: &Path, backend: BackendKind) -> Result<f64, String> {
    let mut cfg = RunConfig::new(dir, d("2020-01-01"), d("2021-12-31"), backend);
    cfg.test_start = Some(d("2021-01-01"));
    cfg.conferences = false;
    let art = Engine::from_config(&cfg).and_then(|e| e.run()).map_err(|e| e.to_string())?;
    Ok(art.total_return())
}

fn baseline_sanity() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let mut out = Vec::new();
    for (name, mr) in [("trending", false), ("mean-reverting", true)] {
        let dir = tmp.path().join(name);
        write_dir(&dir, &three_asset_series(99, d("2020-01-01"), d("2021-12-31"), mr)).map_err(|e| e.to_string())?;
        let tsm = total_return(&dir, BackendKind::Tsm)?;
        let zmr = total_return(&dir, BackendKind::Zmr)?;
        let ok = if mr { zmr > tsm } else { tsm > zmr };
        ensure(ok, || format!("{name}: TSM {tsm:+.4} vs ZMR {zmr:+.4}"))?;
        out.push(format!("{name} TSM {tsm:+.3} ZMR {zmr:+.3}"));
    }
    ensure(t.elapsed() < Duration::from_secs(20), || format!("took {:?}", t.elapsed()))?;
    Ok(out.join("; "))
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 16;
    let as_of = d("2021-06-30");
    for size in [1usize, 7, 60, 200] {
        let mut store = MemoryStore::new("agent", MemoryKind::InvestmentReflection, dim);
        for i in 0..size {
            let emb: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ts = d("2021-01-01") + Days::new(rng.random_range(0..181));
            store.insert(NewRecord::new(ts, format!("record {i}"), emb), as_of).map_err(|e| e.to_string())?;
        }
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut brute: Vec<(f64, String)> = store
            .records()
            .iter()
            .map(|r| {
                let dot: f64 = r.embedding.iter().zip(&q).map(|(a, b)| a * b).sum();
                (dot / (norm(&r.embedding) * norm(&q)), r.id.clone())
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for k in [1usize, 5, 200] {
            for exec in [Execution::Sequential, Execution::Parallel] {
                let got = retrieve(&[&store], &Query::new("q", q.clone(), k), as_of, RetrievalMode::Pooled, exec);
                let want = &brute[..k.min(size)];
                ensure(got.len() == want.len(), || format!("size {size} k {k}: {} results", got.len()))?;
                for (g, (s, id)) in got.iter().zip(want) {
                    ensure(&g.record.id == id && (g.score - s).abs() <= 1e-12, || {
                        format!("size {size} k {k}: got {} ({}) want {id} ({s})", g.record.id, g.score)
                    })?;
                }
            }
        }
    }
    Ok("stores of 1..200 records, k ∈ {1, 5, 200}, both execution modes".into())
}

fn ledger_oracle() -> Check {
    let dir = fixtures().join("ledger");
    let cfg = RunConfig::from_file(&dir.join("config.json")).map_err(|e| e.to_string())?;
    let art = Engine::from_config(&cfg).and_then(|e| e.run()).map_err(|e| e.to_string())?;
    let mut rdr = csv::Reader::from_path(dir.join("ledger.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<BTreeMap<String, String>> = rdr.deserialize().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(rows.len() == art.equity.len(), || format!("{} ledger rows vs {} steps", rows.len(), art.equity.len()))?;
    let mut worst = 0.0f64;
    for (i, row) in rows.iter().enumerate() {
        let date = d(&row["date"]);
        let want: f64 = row["total_value"].parse().map_err(|_| "bad ledger value")?;
        ensure(art.dates[i] == date, || format!("step {i}: date {} vs {date}", art.dates[i]))?;
        let err = (art.equity[i] - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("{date}: equity {} vs ledger {want}", art.equity[i]))?;
    }
    Ok(format!("{} steps, max abs error {worst:.1e}", rows.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("ARR/TR consistency", arr_tr_consistency),
        ("allocator grid oracle", allocator_oracle),
        ("CVaR oracle", cvar_oracle),
        ("EMC trigger exactness", emc_triggers),
        ("metric identities", metric_identities),
        ("determinism", determinism),
        ("temporal gating", temporal_gating),
        ("baseline harness sanity", baseline_sanity),
        ("memory retrieval oracle", retrieval_oracle),
        ("ledger oracle", ledger_oracle),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = t.elapsed();
        match res {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({elapsed:.2?}) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({elapsed:.2?}) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

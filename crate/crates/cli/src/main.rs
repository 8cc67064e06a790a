use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use hedgeflow::allocator::{estimate_inputs, optimize, AllocationProblem, DEFAULT_ALPHA, DEFAULT_CYCLE_DAYS, DEFAULT_LAMBDA};
use hedgeflow::engine::{self, ConfigError, EngineError, RunConfig};
use hedgeflow::market::{scan_ohlcv, AssetClass, AssetId, ReturnSeries, MANIFEST_FILE};

const EXIT_FINDINGS: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DETERMINISM: u8 = 3;

#[derive(Parser)]
#[command(name = "hedgeflow", version, about = "Multi-agent hedging backtests on daily OHLCV data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a data directory and summarize every price file.
    Ingest {
        dir: PathBuf,
        /// Exit 1 when any violation is found.
        #[arg(long)]
        strict: bool,
    },
    /// One-shot budget allocation from a CSV of per-class daily returns.
    Allocate {
        #[arg(long)]
        returns: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda1: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda2: f64,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Trading days per budget cycle used to scale the mean return.
        #[arg(long, default_value_t = DEFAULT_CYCLE_DAYS)]
        cycle_days: usize,
    },
    /// Run a backtest and write its artifacts.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative-return CSV and metrics table for one or more runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where the comparison CSV goes when several runs are given.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error with a fixed process exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        let e = e.into();
        let code = if let Some(err) = e.downcast_ref::<EngineError>() {
            match err {
                _ if err.is_determinism_violation() => EXIT_DETERMINISM,
                EngineError::Config(_) => EXIT_USAGE,
                _ => EXIT_FINDINGS,
            }
        } else if e.downcast_ref::<ConfigError>().is_some() {
            EXIT_USAGE
        } else {
            EXIT_FINDINGS
        };
        Exit(code, e)
    }
}

fn usage(e: anyhow::Error) -> Exit {
    Exit(EXIT_USAGE, e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Ingest { dir, strict } => ingest(&dir, strict),
        Command::Allocate { returns, lambda1, lambda2, alpha, cycle_days } => {
            allocate(&returns, lambda1, lambda2, alpha, cycle_days)
        }
        Command::Backtest { config, out } => backtest(&config, out),
        Command::Report { run_dirs, out } => report(&run_dirs, out),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn csv_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest)?;
        let entries: Vec<Value> = serde_json::from_str(&text).with_context(|| manifest.display().to_string())?;
        return entries
            .iter()
            .map(|e| {
                let sym = e["symbol"].as_str().ok_or_else(|| anyhow!("{}: entry without symbol", manifest.display()))?;
                Ok((sym.to_string(), dir.join(format!("{sym}.csv"))))
            })
            .collect();
    }
    let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    Ok(out)
}

fn ingest(dir: &Path, strict: bool) -> Result<u8, Exit> {
    if !dir.is_dir() {
        return Err(usage(anyhow!("data directory {} does not exist", dir.display())));
    }
    let files = csv_files(dir)?;
    if files.is_empty() {
        println!("warning: 0 assets in {}", dir.display());
        return Ok(EXIT_FINDINGS);
    }
    let mut total = 0;
    for (sym, path) in &files {
        match scan_ohlcv(path) {
            Ok(rep) => {
                let span = match (rep.bars.first(), rep.bars.last()) {
                    (Some(a), Some(b)) => format!("{} .. {}", a.date, b.date),
                    _ => "no valid bars".into(),
                };
                println!("{sym}: {} bars, {span}, {} violations", rep.bars.len(), rep.violations.len());
                for v in &rep.violations {
                    let date = v.date.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
                    println!("  line {} date {date}: {}", v.line, v.reason);
                }
                total += rep.violations.len();
            }
            Err(e) => {
                println!("{sym}: unreadable: {e}");
                total += 1;
            }
        }
    }
    println!("{} assets, {total} violations", files.len());
    Ok(if strict && total > 0 { EXIT_FINDINGS } else { 0 })
}

/// Reads a returns CSV: an optional leading `date` column, then one column
/// per asset class.
fn read_returns(path: &Path) -> Result<Vec<ReturnSeries>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let dated = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let names = &header[usize::from(dated)..];
    if names.is_empty() {
        bail!("{}: no return columns", path.display());
    }
    let origin = chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    let mut dates = Vec::new();
    let mut cols = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        dates.push(if dated {
            chrono::NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
                .with_context(|| format!("{}:{line}: bad date", path.display()))?
        } else {
            origin + chrono::Days::new(i as u64)
        });
        for (j, col) in cols.iter_mut().enumerate() {
            let cell = rec.get(j + usize::from(dated)).unwrap_or("");
            let v: f64 = cell.trim().parse().with_context(|| format!("{}:{line}: bad value `{cell}`", path.display()))?;
            col.push(v);
        }
    }
    names
        .iter()
        .zip(cols)
        .map(|(name, returns)| {
            let class: AssetClass = serde_json::from_value(json!(name.to_lowercase())).unwrap_or(AssetClass::Equity);
            Ok(ReturnSeries { asset: AssetId::new(name.clone(), class)?, dates: dates.clone(), returns })
        })
        .collect()
}

fn allocate(path: &Path, lambda1: f64, lambda2: f64, alpha: f64, cycle: usize) -> Result<u8, Exit> {
    let series = read_returns(path).map_err(usage)?;
    let rows = series[0].returns.len();
    let est = estimate_inputs(&series, rows, cycle)?;
    let problem = AllocationProblem { rho: est.rho, cov: est.cov, history: est.history, lambda1, lambda2, alpha };
    problem.validate().map_err(|e| usage(e.into()))?;
    let a = optimize(&problem)?;
    let out = json!({
        "weights": a.weights.omega,
        "objective": a.terms.objective,
        "i_etr": a.terms.i_etr,
        "i_pr": a.terms.i_pr,
        "i_cvar": a.terms.i_cvar,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(0)
}

fn fmt_metric(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

const METRICS: [(&str, &str); 9] = [
    ("tr", "TR"),
    ("arr", "ARR"),
    ("sr", "SR"),
    ("cr", "CR"),
    ("sor", "SoR"),
    ("mdd", "MDD"),
    ("vol", "Vol"),
    ("ent", "ENT"),
    ("enb", "ENB"),
];

fn metrics_table(columns: &[(String, Value)]) -> String {
    let mut s = format!("{:<8}", "metric");
    for (name, _) in columns {
        let _ = write!(s, " {name:>14}");
    }
    s.push('\n');
    for (key, label) in METRICS {
        let _ = write!(s, "{label:<8}");
        for (_, m) in columns {
            let _ = write!(s, " {:>14}", fmt_metric(&m[key]));
        }
        s.push('\n');
    }
    s
}

fn backtest(config: &Path, out: Option<PathBuf>) -> Result<u8, Exit> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(o) = out {
        cfg.output_dir = Some(o);
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("hedgeflow-run"));
    cfg.output_dir = Some(dir.clone());
    let art = engine::run(&cfg)?;
    let summary = serde_json::to_value(art.summary()).expect("summary serializes");
    print!("{}", metrics_table(&[("run".into(), summary)]));
    println!("{} steps, {} fills, artifacts in {}", art.dates.len(), art.fills.len(), dir.display());
    Ok(0)
}

fn read_equity(dir: &Path) -> Result<Vec<(String, f64)>> {
    let path = dir.join("equity.csv");
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("missing {}", path.display()))?;
    let rows = rdr
        .records()
        .map(|r| {
            let r = r?;
            Ok((r[0].to_string(), r[1].parse::<f64>().with_context(|| format!("{}: bad value", path.display()))?))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() || rows[0].1 <= 0.0 {
        bail!("{}: empty or non-positive equity curve", path.display());
    }
    Ok(rows)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn report(dirs: &[PathBuf], out: Option<PathBuf>) -> Result<u8, Exit> {
    let mut columns = Vec::new();
    let mut curves: Vec<BTreeMap<String, f64>> = Vec::new();
    for dir in dirs {
        let eq = read_equity(dir).map_err(usage)?;
        let mpath = dir.join("metrics.json");
        let text = std::fs::read_to_string(&mpath).with_context(|| format!("missing {}", mpath.display())).map_err(usage)?;
        let metrics: Value = serde_json::from_str(&text).with_context(|| mpath.display().to_string()).map_err(usage)?;
        let v0 = eq[0].1;
        let mut csv = String::from("date,cumulative_return\n");
        let mut curve = BTreeMap::new();
        for (d, v) in &eq {
            let c = v / v0 - 1.0;
            let _ = writeln!(csv, "{d},{c}");
            curve.insert(d.clone(), c);
        }
        std::fs::write(dir.join("cumret.csv"), csv).context("writing cumret.csv")?;
        columns.push((run_name(dir), metrics));
        curves.push(curve);
    }
    if dirs.len() > 1 {
        let names: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        let names: Vec<String> = if unique.len() == names.len() {
            names
        } else {
            dirs.iter().map(|d| d.display().to_string()).collect()
        };
        let dates: BTreeSet<&String> = curves.iter().flat_map(|c| c.keys()).collect();
        let mut csv = format!("date,{}\n", names.join(","));
        for d in dates {
            let row: Vec<String> = curves.iter().map(|c| c.get(d).map(|v| v.to_string()).unwrap_or_default()).collect();
            let _ = writeln!(csv, "{d},{}", row.join(","));
        }
        let out = out.unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
        let path = out.join("comparison.csv");
        std::fs::write(&path, csv).with_context(|| path.display().to_string())?;
        println!("comparison written to {}", path.display());
    }
    print!("{}", metrics_table(&columns));
    Ok(0)
}

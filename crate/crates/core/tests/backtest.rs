use std::path::{Path, PathBuf};

use hedgeflow::engine::{run_sweep, Engine, ExecutionPrice, RunConfig, Side};
use hedgeflow::policy::BackendKind;
use hedgeflow::Execution;

fn sample() -> RunConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sample_config.json");
    RunConfig::from_file(&path).unwrap()
}

#[test]
fn sweep_is_identical_in_both_execution_modes() {
    let cfgs: Vec<RunConfig> = [BackendKind::Tsm, BackendKind::Zmr, BackendKind::MeanVariance, BackendKind::BuyAndHold]
        .into_iter()
        .map(|b| RunConfig { policy_backend: b, ..sample() })
        .collect();
    let seq = run_sweep(&cfgs, Execution::Sequential);
    let par = run_sweep(&cfgs, Execution::Parallel);
    for (a, b) in seq.iter().zip(&par) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.equity, b.equity);
        assert_eq!(a.fills, b.fills);
        assert_eq!(a.equity_csv(), b.equity_csv());
    }
}

#[test]
fn inner_parallelism_does_not_change_results() {
    let seq = Engine::from_config(&RunConfig { execution: Execution::Sequential, ..sample() }).unwrap().run().unwrap();
    let par = Engine::from_config(&RunConfig { execution: Execution::Parallel, ..sample() }).unwrap().run().unwrap();
    assert_eq!(seq.equity, par.equity);
    assert_eq!(seq.budgets, par.budgets);
}

#[test]
fn next_open_fills_at_following_open() {
    let cfg = RunConfig { execution_price: ExecutionPrice::NextOpen, policy_backend: BackendKind::BuyAndHold, ..sample() };
    let engine = Engine::from_config(&cfg).unwrap();
    let art = engine.run().unwrap();
    let ds = engine.dataset();
    let first = &art.fills[0];
    assert_eq!(first.side, Side::Buy);
    assert!(first.date > cfg.test_start());
    let idx = ds.asset_index(&first.symbol).unwrap();
    let bar = ds.bar_on(idx, first.date).unwrap();
    let class = ds.series()[idx].asset.asset_class;
    assert_eq!(first.price, bar.valuation_open(class));
}

#[test]
fn artifacts_and_budgets() {
    let art = Engine::from_config(&sample()).unwrap().run().unwrap();
    for b in &art.budgets {
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(b.iter().all(|x| *x >= 0.0));
    }
    let s = art.summary();
    assert_eq!(s.conferences.get("BAC").copied().unwrap_or(0), 13);
    assert!((s.reward.compounded - s.metrics.as_ref().unwrap().tr).abs() < 1e-9);
    let dir = tempfile::tempdir().unwrap();
    art.write(dir.path()).unwrap();
    let equity = std::fs::read_to_string(dir.path().join("equity.csv")).unwrap();
    assert_eq!(equity.lines().count(), art.dates.len() + 1);
    let mem: Vec<_> = std::fs::read_dir(dir.path().join("memory")).unwrap().collect();
    assert_eq!(mem.len(), 7);
}

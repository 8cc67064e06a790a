use std::hint::black_box;

use chrono::{Days, NaiveDate};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hedgeflow::allocator::{grid_search, AllocationProblem};
use hedgeflow::engine::{run_sweep, RunConfig};
use hedgeflow::memory::{retrieve, MemoryKind, MemoryStore, NewRecord, Query, RetrievalMode};
use hedgeflow::policy::BackendKind;
use hedgeflow::synth::{three_asset_series, write_dir};
use hedgeflow::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn problem(n: usize, days: usize) -> AllocationProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let history: Vec<Vec<f64>> = (0..days).map(|_| (0..n).map(|_| rng.random_range(-0.03..0.03)).collect()).collect();
    let cov = (0..n).map(|i| (0..n).map(|j| if i == j { 4e-4 } else { 1e-4 }).collect()).collect();
    AllocationProblem { rho: vec![0.01, 0.02, 0.015][..n].to_vec(), cov, history, lambda1: 1.0, lambda2: 1.0, alpha: 0.95 }
}

fn bench_grid(c: &mut Criterion) {
    let p = problem(3, 252);
    let mut g = c.benchmark_group("grid_search_3x252");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| grid_search(black_box(&p), 100, exec)));
    }
    g.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 256;
    let as_of = NaiveDate::from_ymd_opt(2021, 12, 31).unwrap();
    let mut store = MemoryStore::new("bench", MemoryKind::MarketInformation, dim);
    for i in 0..20_000 {
        let emb: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ts = as_of - Days::new(i % 365);
        store.insert(NewRecord::new(ts, format!("r{i}"), emb), as_of).unwrap();
    }
    let q = Query::new("q", (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), 5);
    let mut g = c.benchmark_group("retrieve_20k_x256");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| retrieve(&[black_box(&store)], &q, as_of, RetrievalMode::Pooled, exec))
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(2021, 6, 30).unwrap();
    write_dir(dir.path(), &three_asset_series(5, start, end, false)).unwrap();
    let cfgs: Vec<RunConfig> = [BackendKind::Tsm, BackendKind::Zmr, BackendKind::MeanVariance, BackendKind::BuyAndHold]
        .into_iter()
        .map(|b| {
            let mut cfg = RunConfig::new(dir.path(), start, end, b);
            cfg.test_start = NaiveDate::from_ymd_opt(2021, 1, 1);
            cfg.execution = Execution::Sequential;
            cfg
        })
        .collect();
    let mut g = c.benchmark_group("backtest_sweep_4");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_sweep(black_box(&cfgs), exec)));
    }
    g.finish();
}

criterion_group!(benches, bench_grid, bench_retrieval, bench_sweep);
criterion_main!(benches);

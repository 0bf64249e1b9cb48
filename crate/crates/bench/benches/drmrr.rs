use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drmrr::dataset::{generate_synthetic, SyntheticSpec};
use drmrr::gtd::{build_query_gtd, GtdParams};
use drmrr::metrics::QueryMetrics;
use drmrr::norms::NormOrder;
use drmrr::ranker::rank_from_gtd;
use drmrr::solver::{feature_matrix, fit, objective, predict_gtd, subgradient, SolverConfig, TrainingSet};

fn synthetic(docs: usize) -> drmrr::RankingDataset {
    let spec = SyntheticSpec {
        n_queries: 40,
        docs_per_query: docs,
        p: 20,
        y_max: 2,
        noise_scale: 0.5,
    };
    generate_synthetic(&spec, 1).expect("synthetic data")
}

fn gtd(c: &mut Criterion) {
    let params = GtdParams::default();
    let mut group = c.benchmark_group("gtd_matrix");
    for docs in [10, 100, 1000] {
        let q = synthetic(docs).queries.swap_remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(docs), &q, |b, q| {
            b.iter(|| build_query_gtd(black_box(q), &params).unwrap())
        });
    }
    group.finish();
}

fn solver(c: &mut Criterion) {
    let ds = synthetic(20);
    let params = GtdParams::default();
    let ts = TrainingSet::from_queries(&ds.queries, &params).unwrap();
    let cfg = SolverConfig {
        max_iters: 200,
        ..SolverConfig::default()
    };
    let w = fit(&ts, 0.1, NormOrder::Two, &cfg).unwrap();
    let power = cfg.power();
    let mut group = c.benchmark_group("solver");
    for r in [NormOrder::One, NormOrder::Two, NormOrder::Inf] {
        group.bench_function(BenchmarkId::new("objective", format!("{r:?}")), |b| {
            b.iter(|| objective(black_box(&w.b), &ts, 0.1, r, &power))
        });
        group.bench_function(BenchmarkId::new("subgradient", format!("{r:?}")), |b| {
            b.iter(|| subgradient(black_box(&w.b), &ts, 0.1, r, &power))
        });
    }
    group.sample_size(10);
    group.bench_function("fit_200_iters", |b| {
        b.iter(|| fit(black_box(&ts), 0.1, NormOrder::Two, &cfg).unwrap())
    });
    group.finish();
}

fn ranking_and_metrics(c: &mut Criterion) {
    let ds = synthetic(200);
    let params = GtdParams::default();
    let ts = TrainingSet::from_queries(&ds.queries[..10], &params).unwrap();
    let cfg = SolverConfig {
        max_iters: 200,
        ..SolverConfig::default()
    };
    let w = fit(&ts, 0.1, NormOrder::Two, &cfg).unwrap();
    let q = &ds.queries[20];
    let pred = predict_gtd(&w, &feature_matrix(q)).unwrap();
    c.bench_function("rank_from_gtd_200", |b| b.iter(|| rank_from_gtd(black_box(&pred)).unwrap()));
    let ranked = rank_from_gtd(&pred).unwrap().ranked_labels(q);
    c.bench_function("query_metrics_200", |b| {
        b.iter(|| QueryMetrics::compute(black_box(&ranked), &[1, 5, 10, 20], 2.0))
    });
}

criterion_group!(benches, gtd, solver, ranking_and_metrics);
criterion_main!(benches);

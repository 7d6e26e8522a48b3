//! One worker against the full pool on the data-parallel paths. Build with
//! `--no-default-features` to time the plain sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nnscore::analysis::{run_eval, EstimatorKind, EstimatorSpec, EvalProtocol};
use nnscore::dataset::{generate, DatasetStore, SyntheticSpec};
use nnscore::estimators::{build_knn_proposal, snis_estimate, Proposal};
use nnscore::knn::KnnIndex;
use nnscore::oracle::exact_posterior;
use nnscore::par;
use nnscore::rng;
use nnscore::sampler::{self, SamplerConfig, ScoreSource};
use nnscore::schedules::DiffusionSchedule;

fn pools() -> [(&'static str, par::Pool); 2] {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    [("1", par::Pool::new(1)), ("all", par::Pool::new(all))]
}

fn data() -> DatasetStore {
    generate(&SyntheticSpec::gmm(16_384, 32, 8, 0.1, 0)).unwrap()
}

fn single_query(c: &mut Criterion) {
    let d = data();
    let s = DiffusionSchedule::edm();
    let index = KnnIndex::build(&d);
    let z = s.noise_point(d.row(7), 0.3, &vec![0.5; d.dim()]).unwrap();
    let mut g = c.benchmark_group("single_query");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("exact_posterior", name), |b| {
            b.iter(|| pool.install(|| exact_posterior(&d, &s, black_box(&z), 0.3).unwrap()))
        });
        g.bench_function(BenchmarkId::new("knn_search", name), |b| {
            b.iter(|| pool.install(|| index.search(black_box(&z), 64).unwrap()))
        });
    }
    let q = build_knn_proposal(&index, &s, &z, 0.3, 64).unwrap();
    g.bench_function("knn_snis_n256", |b| {
        let mut r = rng::stream(0, &[]);
        b.iter(|| {
            snis_estimate(&d, &s, black_box(&z), 0.3, Proposal::Knn(&q), 256, &mut r).unwrap()
        })
    });
    g.finish();
}

fn eval_protocol(c: &mut Criterion) {
    let d = generate(&SyntheticSpec::gmm(2048, 8, 4, 0.1, 1)).unwrap();
    let s = DiffusionSchedule::edm();
    let protocol = EvalProtocol {
        t_grid: vec![0.05, 0.5],
        m_points: 64,
        reps: 4,
        estimators: vec![
            EstimatorSpec::new(EstimatorKind::Knn, 128, 32),
            EstimatorSpec::new(EstimatorKind::Uniform, 128, 0),
        ],
        master_seed: 2,
    };
    let mut g = c.benchmark_group("run_eval");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(name, |b| {
            b.iter(|| pool.install(|| run_eval(&d, &s, &protocol).unwrap()))
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let d = generate(&SyntheticSpec::gmm(2048, 8, 4, 0.1, 3)).unwrap();
    let s = DiffusionSchedule::edm();
    let mut cfg = SamplerConfig::for_schedule(&s);
    cfg.steps = 10;
    cfg.n_samples = 128;
    cfg.score_source = ScoreSource::Knn { n: 64, k: 16 };
    let mut g = c.benchmark_group("sample");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(name, |b| {
            b.iter(|| pool.install(|| sampler::sample(&d, &s, &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, single_query, eval_protocol, sampling);
criterion_main!(benches);

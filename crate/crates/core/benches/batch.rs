//! Sequential against parallel execution for the two hot loops: a batch of
//! guided trajectories and the metric suite.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mgflow::harness::run::reference_set;
use mgflow::harness::{run_sample, ExperimentConfig};
use mgflow::metrics::knn_precision_recall;
use mgflow::{ExecPolicy, GaussianMixture, MetricReport};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tree2d.toml");
const POLICIES: [(&str, ExecPolicy); 2] = [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)];

fn sampling(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::new(FIXTURE, 1);
    cfg.n_trajectories = 4096;
    cfg.record_trajectories = 0;
    cfg.guidance.alpha = 0.6;
    let mut group = c.benchmark_group("sample_4096x16");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_sample(&cfg, policy).unwrap().samples.len()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let gmm = GaussianMixture::load(FIXTURE.as_ref()).unwrap();
    let real = reference_set(&gmm, 1, 0, 8192, ExecPolicy::Parallel).unwrap();
    let fake = reference_set(&gmm, 2, 0, 8192, ExecPolicy::Parallel).unwrap();
    let mut group = c.benchmark_group("metrics_8192");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_function(BenchmarkId::new("knn", name), |b| {
            b.iter(|| black_box(knn_precision_recall(&real, &fake, 3, policy).unwrap()))
        });
        group.bench_function(BenchmarkId::new("report", name), |b| {
            b.iter(|| black_box(MetricReport::compute(&real, &fake, 3, 0.2, policy).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, metrics);
criterion_main!(benches);

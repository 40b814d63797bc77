//! Query latency against target horizon: continuous slicing versus the
//! simulated autoregressive rollout.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gauss4d::bench::{autoregressive_query, synthetic_world};
use gauss4d::optimize::query_world;
use gauss4d::{Execution, GridSpec};

fn horizons(c: &mut Criterion) {
    let world = synthetic_world(0, 512, GridSpec::desk(4), 3.0).unwrap();
    let mut group = c.benchmark_group("query");
    for &h in &[0.5f64, 1.5, 3.0] {
        for (mode, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(format!("continuous_{mode}"), h), &h, |b, &h| {
                b.iter(|| query_world(&world, h, false, exec).unwrap())
            });
            group.bench_with_input(BenchmarkId::new(format!("autoregressive_{mode}"), h), &h, |b, &h| {
                b.iter(|| autoregressive_query(&world, h, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, horizons);
criterion_main!(benches);

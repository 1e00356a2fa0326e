//! Per-sample pipeline throughput: rayon pool against a single thread.
//!
//! Built without the `parallel` feature, `par` falls back to plain
//! iterators and only the sequential row is measured.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use anchorsel::datagen::{generate_bundle, SyntheticSpec};
use anchorsel::engine::{run_stream, AdaptationConfig, Method};

fn bundle() -> anchorsel::FeatureBundle {
    generate_bundle(&SyntheticSpec {
        num_samples: 128,
        ..SyntheticSpec::default()
    })
    .expect("benchmark bundle")
}

fn stream(c: &mut Criterion) {
    let bundle = bundle();
    let mut group = c.benchmark_group("run_stream");
    group.sample_size(10);
    group.throughput(Throughput::Elements(bundle.samples.len() as u64));

    // Bankless methods fan out over samples; `ours` carries the bank and
    // stays sequential, so it bounds what the pool can buy.
    for method in [Method::TptEntropy, Method::Ours] {
        let cfg = AdaptationConfig {
            method,
            ..AdaptationConfig::default()
        };
        let run = || black_box(run_stream(&cfg, &bundle).expect("run"));

        #[cfg(feature = "parallel")]
        {
            let single = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("pool");
            group.bench_function(BenchmarkId::new("sequential", method), |b| {
                b.iter(|| single.install(run))
            });
            let threads = rayon::current_num_threads();
            group.bench_function(BenchmarkId::new(format!("rayon-{threads}"), method), |b| {
                b.iter(run)
            });
        }

        #[cfg(not(feature = "parallel"))]
        group.bench_function(BenchmarkId::new("sequential", method), |b| b.iter(run));
    }
    group.finish();
}

criterion_group!(benches, stream);
criterion_main!(benches);

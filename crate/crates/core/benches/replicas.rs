use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hierperc_core::percsim::{origin_cluster_samples, BlockSampler};
use hierperc_core::replicas::{map_replicas, Execution};
use hierperc_core::rng::StreamKey;
use hierperc_core::ModelParams;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn block_replicas(c: &mut Criterion) {
    let params = ModelParams::new(1, 2, 0.5, 0.77).unwrap();
    let sampler = BlockSampler::new(&params, 10).unwrap();
    let key = StreamKey::new(7);
    let mut group = c.benchmark_group("block_n10_x256");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_replicas(exec, 256, |r| sampler.sample_multiset(key.replica(r)).max()))
        });
    }
    group.finish();
}

fn explorer_replicas(c: &mut Criterion) {
    let params = ModelParams::new(1, 2, 0.2, 0.178).unwrap();
    let key = StreamKey::new(9);
    let mut group = c.benchmark_group("explorer_n28_x4096");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| origin_cluster_samples(&params, 28, 4096, key, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, block_replicas, explorer_replicas);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forestnet_bench::fixture;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for (trees, depth) in [(2, 4), (4, 6)] {
        let f = fixture(48, trees, depth).expect("fixture trains");
        let id = format!("T{trees}_D{depth}");
        group.bench_with_input(BenchmarkId::new("forest_stack", &id), &f, |b, f| b.iter(|| f.stack.predict(&f.filters).unwrap()));
        group.bench_with_input(BenchmarkId::new("sparse_net", &id), &f, |b, f| b.iter(|| f.net.predict(&f.filters).unwrap()));
        group.bench_with_input(BenchmarkId::new("remapped_stack", &id), &f, |b, f| b.iter(|| f.remapped.predict(&f.filters).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);

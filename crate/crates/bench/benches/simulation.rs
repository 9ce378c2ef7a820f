use criterion::{criterion_group, criterion_main, Criterion};
use gridtrust::sim::run;
use gridtrust_bench::fixture;

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    for name in ["separation.toml", "failover.toml", "mixed.toml"] {
        let sc = fixture(name);
        g.bench_function(name.trim_end_matches(".toml"), |b| {
            b.iter(|| run(&sc).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulation);
criterion_main!(benches);

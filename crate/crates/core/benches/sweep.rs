use criterion::{criterion_group, criterion_main, Criterion};
use snapkv::harness::par;
use snapkv::harness::runner::run;
use snapkv::harness::scenario::Scenario;

fn run_seed(seed: u64) -> usize {
    let s = Scenario { seed, ops: 500, ..Scenario::default() };
    run(&s).expect("valid scenario").trace.len()
}

fn sweep(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..32).collect();
    let mut g = c.benchmark_group("sweep_32_seeds");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(&seeds, run_seed)));
    #[cfg(feature = "parallel")]
    g.bench_function("rayon", |b| b.iter(|| par::map_par(&seeds, run_seed)));
    g.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);

use cellnas_bench::small_search;
use cellnas_core::Searcher;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn search_epochs(c: &mut Criterion) {
    let (config, data) = small_search();
    let mut group = c.benchmark_group("search_epoch");
    group.sample_size(10);
    group.bench_function("warmup", |b| {
        b.iter_batched(
            || Searcher::for_data(config.clone(), &data).unwrap(),
            |mut s| s.run_epoch(&data).map(|_| ()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let mut warmed = Searcher::for_data(config.clone(), &data).unwrap();
    warmed.run_until(&data, config.warmup_epochs, |_| Ok(())).unwrap();
    let checkpoint = warmed.to_checkpoint();
    group.bench_function("alternating", |b| {
        b.iter_batched(
            || Searcher::from_checkpoint(&checkpoint).unwrap(),
            |mut s| s.run_epoch(&data).map(|_| ()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, search_epochs);
criterion_main!(benches);

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use snapnet::batch::{Mode, Pool};
use snapnet::bytecode::{FormatSpec, Mutator, Program, NET_SPEC};
use snapnet::coverage::DEFAULT_MAP_SIZE;
use snapnet::guest::{lookup, TargetOptions, DEFAULT_OP_BUDGET};

fn programs(spec: &FormatSpec, seeds: &[Program], n: usize) -> Vec<Program> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mutator = Mutator::new(spec);
    (0..n).map(|i| mutator.mutate(&seeds[i % seeds.len()], &mut rng, seeds, 0)).collect()
}

fn batch(c: &mut Criterion) {
    let spec = FormatSpec::parse(NET_SPEC).unwrap();
    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    for name in ["ftp_like", "longprefix"] {
        let target = lookup(name, &TargetOptions::default()).unwrap();
        let seeds = target.default_seeds(&spec);
        let work = programs(&spec, &seeds, 256);
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut pool = Pool::new(Arc::clone(&target), &spec, workers, DEFAULT_OP_BUDGET, DEFAULT_MAP_SIZE).unwrap();
        for mode in [Mode::Sequential, Mode::Parallel] {
            g.bench_with_input(BenchmarkId::new(format!("{mode:?}"), name), &work, |b, work| {
                b.iter(|| black_box(pool.run(work, mode).unwrap()))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);

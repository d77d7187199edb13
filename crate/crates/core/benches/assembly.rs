use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nlch::kernels::Kernel;
use nlch::multishape::{assemble_operator, PartitionMode};
use nlch::spectral::unit_square_grid;
use nlch::Execution;

fn bench_assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assemble_operator");
    group.sample_size(10);
    let kernel = Kernel::newtonian2d(1.0);
    for n in [8usize, 12] {
        let grid = unit_square_grid(n).unwrap();
        for (name, exec) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| assemble_operator(&grid, &kernel, 1e-2, 2.0, PartitionMode::Maximal, true, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_assembly);
criterion_main!(benches);

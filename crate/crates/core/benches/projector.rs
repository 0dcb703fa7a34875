//! Parallel vs forced-sequential throughput of the projection kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xct_core::parallel::force_sequential;
use xct_core::phantom::{generate_phantom, PhantomParams};
use xct_core::projector::{hu_to_attenuation, project_angle, project_frontal};

fn bench_projection(c: &mut Criterion) {
    let params = PhantomParams::for_extent(42, [160.0, 160.0, 160.0]);
    let (hu, _) = generate_phantom(&params, (64, 64, 64), (2.5, 2.5, 2.5)).unwrap();
    let mu = hu_to_attenuation(&hu, 0.0206).unwrap();

    let mut group = c.benchmark_group("project_frontal_64");
    for &seq in &[false, true] {
        let label = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &seq, |b, &seq| {
            force_sequential(seq);
            b.iter(|| project_frontal(&mu).unwrap());
            force_sequential(false);
        });
    }
    group.finish();

    let mut group = c.benchmark_group("project_angle_30deg_64");
    for &seq in &[false, true] {
        let label = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &seq, |b, &seq| {
            force_sequential(seq);
            b.iter(|| project_angle(&mu, 30.0, 2).unwrap());
            force_sequential(false);
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_projection
}
criterion_main!(benches);

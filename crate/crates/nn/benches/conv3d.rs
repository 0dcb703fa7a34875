//! Parallel vs forced-sequential throughput of the conv3d forward/backward
//! path, measured through the graph (the way training uses it).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xct_core::parallel::force_sequential;
use xct_nn::graph::ConvCfg;
use xct_nn::{init, Graph, ParamStore, Tensor};

fn setup() -> (ParamStore, usize, usize, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let w = store
        .add("w", init::conv_weight(&mut rng, 16, 16, (3, 3, 3)))
        .unwrap();
    let b = store.add("b", Tensor::zeros(vec![16])).unwrap();
    let x = init::uniform_fan_in(&mut rng, vec![16, 16, 16, 16], 1);
    (store, w, b, x)
}

fn run(store: &ParamStore, w: usize, b: usize, x: &Tensor) -> f64 {
    let cfg = ConvCfg {
        kernel: (3, 3, 3),
        stride: (1, 1, 1),
        pad: (1, 1, 1),
    };
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let wn = g.param(store, w);
    let bn = g.param(store, b);
    let y = g.conv3d(xn, wn, Some(bn), cfg);
    let loss = g.mean_all(y);
    let grads = g.backward(loss);
    grads.get(w).unwrap().data()[0]
}

fn bench_conv(c: &mut Criterion) {
    let (store, w, b, x) = setup();
    let mut group = c.benchmark_group("conv3d_16ch_16cube_fwd_bwd");
    for &seq in &[false, true] {
        let label = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &seq, |bench, &seq| {
            force_sequential(seq);
            bench.iter(|| run(&store, w, b, &x));
            force_sequential(false);
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv
}
criterion_main!(benches);

use std::time::Instant;
use xct_core::phantom::{generate_phantom, PhantomParams};
use xct_core::volume::normalize_hu;
use xct_models::compressor::{train_compressor, CompressorConfig};

fn main() {
    let dims = (32, 32, 32);
    let sp = (5.0, 5.0, 5.0);
    let vols: Vec<_> = (0..4)
        .map(|s| {
            let p = PhantomParams::for_extent(s, [160.0, 160.0, 160.0]);
            let (hu, _) = generate_phantom(&p, dims, sp).unwrap();
            normalize_hu(&hu, (-1000.0, 1000.0)).unwrap()
        })
        .collect();
    let cfg = CompressorConfig { iterations: 10, ..CompressorConfig::default() };
    let t0 = Instant::now();
    let _ = train_compressor(&vols, &cfg, None, None).unwrap();
    println!("10 vq steps: {:.2?} ({:.3} s/step)", t0.elapsed(), t0.elapsed().as_secs_f64() / 10.0);
}

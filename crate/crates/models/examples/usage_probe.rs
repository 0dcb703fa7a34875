//! Compare codebook usage after training with the normalized-space loss vs
//! the raw-space baseline.

use std::time::Instant;
use xct_core::phantom::{generate_phantom, PhantomParams};
use xct_core::volume::normalize_hu;
use xct_models::compressor::{
    evaluate_usage, train_compressor, CompressorConfig, CompressorModel,
};

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let dims = (32, 32, 32);
    let sp = (5.0, 5.0, 5.0);
    let vols: Vec<_> = (0..16)
        .map(|s| {
            let p = PhantomParams::for_extent(s, [160.0, 160.0, 160.0]);
            let (hu, _) = generate_phantom(&p, dims, sp).unwrap();
            normalize_hu(&hu, (-1000.0, 1000.0)).unwrap()
        })
        .collect();

    use xct_models::codebook::LookupMode;
    let combos = [
        ("homogeneous+normalized", true, LookupMode::Normalized),
        ("baseline+raw", false, LookupMode::Raw),
    ];
    for (label, homogeneous, mode) in combos {
        let mut cfg = CompressorConfig {
            iterations: steps,
            homogeneous_vq_loss: homogeneous,
            lookup_mode: mode,
            ..CompressorConfig::default()
        };
        cfg.loss.gan = 0.0;
        let t0 = Instant::now();
        let ckpt = train_compressor(&vols, &cfg, None, None).unwrap();
        let (model, mut cb) = CompressorModel::from_checkpoint(&ckpt).unwrap();
        let usage = evaluate_usage(&model, &ckpt.store, &mut cb, &vols).unwrap();
        println!(
            "{label}: usage {:.1}% after {steps} steps ({:.1?})",
            usage * 100.0,
            t0.elapsed()
        );
    }
}

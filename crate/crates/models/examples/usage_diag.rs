//! Usage trajectory diagnostics: evaluate codepoint usage, assignment
//! perplexity, and latent-shape spread at intervals during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xct_core::phantom::{generate_phantom, PhantomParams};
use xct_core::volume::normalize_hu;
use xct_models::codebook::{zscore_normalize, LookupMode};
use xct_models::compressor::{train_compressor, CompressorConfig, CompressorModel};

fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h.exp()
}

fn main() {
    let _ = ChaCha8Rng::seed_from_u64(0);
    let dims = (32, 32, 32);
    let sp = (5.0, 5.0, 5.0);
    let vols: Vec<_> = (0..16)
        .map(|s| {
            let p = PhantomParams::for_extent(s, [160.0, 160.0, 160.0]);
            let (hu, _) = generate_phantom(&p, dims, sp).unwrap();
            normalize_hu(&hu, (-1000.0, 1000.0)).unwrap()
        })
        .collect();

    for (label, homog, mode) in [
        ("homo+norm", true, LookupMode::Normalized),
        ("base+raw", false, LookupMode::Raw),
    ] {
        println!("== {label}");
        let mut prev: Option<xct_nn::checkpoint::Checkpoint> = None;
        for target in [0usize, 200, 500, 1000] {
            let mut cfg = CompressorConfig {
                iterations: target.max(1),
                homogeneous_vq_loss: homog,
                lookup_mode: mode,
                ..CompressorConfig::default()
            };
            cfg.loss.gan = 0.0;
            if target == 0 {
                cfg.iterations = 1;
                cfg.lr = 0.0;
            }
            let ckpt = match prev.take() {
                Some(p) if target > 0 => {
                    let rebuilt = xct_nn::checkpoint::Checkpoint {
                        config_json: serde_json::to_string(&cfg).unwrap(),
                        ..p
                    };
                    train_compressor(&vols, &cfg, Some(rebuilt), None).unwrap()
                }
                _ => train_compressor(&vols, &cfg, None, None).unwrap(),
            };
            let (model, mut cb) = CompressorModel::from_checkpoint(&ckpt).unwrap();
            cb.reset_usage();
            let mut z_norms = Vec::new();
            for v in &vols {
                let z = model.encode(&ckpt.store, v).unwrap();
                let idx = cb.assign_batch(&z.values, mode);
                cb.record_usage(&idx);
                for s in 0..z.sites() {
                    let n = zscore_normalize(z.site_vec(s));
                    z_norms.push(n[0]);
                }
            }
            let e_norm_mean = (0..cb.n)
                .map(|i| cb.entry(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / cb.n as f64;
            println!(
                "  step {target}: usage {:.1}% perplexity {:.1} mean|e| {:.4} z0-spread {:.3}",
                cb.usage_fraction() * 100.0,
                perplexity(&cb.usage),
                e_norm_mean,
                std(&z_norms),
            );
            prev = Some(ckpt);
        }
    }
}

fn std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

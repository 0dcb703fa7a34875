//! End-to-end inference: radiograph -> prior tokens -> sampled latent ->
//! dequantize -> decoded volume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use xct_core::projector::Radiograph;
use xct_core::Volume;
use xct_nn::checkpoint::Checkpoint;
use xct_nn::Tensor;

use crate::codebook::Codebook;
use crate::compressor::CompressorModel;
use crate::diffusion::{sample, DmModel, SamplerMode, UNetDenoiser};
use crate::latent::LatentGrid;
use crate::prior::PriorModel;
use crate::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub mode: SamplerMode,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            mode: SamplerMode::Ddim,
            steps: 50,
            seed: 0,
        }
    }
}

/// Reconstruct a CT volume from a single frontal radiograph using the three
/// trained stages. Deterministic for fixed checkpoints and options.
pub fn reconstruct_volume(
    radiograph: &Radiograph,
    vq: &Checkpoint,
    prior: &Checkpoint,
    dm: &Checkpoint,
    opts: &SamplerOptions,
) -> Result<Volume, TrainError> {
    let (comp, codebook) = CompressorModel::from_checkpoint(vq)?;
    let prior_model = PriorModel::from_checkpoint(prior)?;
    let (dm_model, latent_scale) = DmModel::from_checkpoint(dm)?;

    if prior_model.cfg.latent_dims != dm_model.cfg.latent_dims
        || prior_model.cfg.n_z != dm_model.cfg.n_z
    {
        return Err(TrainError::config(
            "prior and diffusion checkpoints disagree on latent geometry",
        ));
    }

    let tokens = prior_model.encode_prior(&prior.store, radiograph, &codebook)?;
    let tokens_t = tokens.to_tensor();

    let (h, w, d) = dm_model.cfg.latent_dims;
    let sched = dm_model.cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let den = UNetDenoiser {
        model: &dm_model,
        store: &dm.store,
    };
    let latent = sample(
        &den,
        &sched,
        vec![dm_model.cfg.n_z, d, h, w],
        &tokens_t,
        opts.mode,
        opts.steps,
        &mut rng,
    )?;

    // Undo the training-time latent normalization, then snap onto the
    // codebook and decode.
    let scaled: Vec<f64> = latent.data().iter().map(|v| v * latent_scale).collect();
    let latent_t = Tensor::new(latent.shape().to_vec(), scaled)?;
    let mut g = xct_nn::Graph::new();
    let node = g.input(latent_t);
    let sites = g.grid_to_sites(node);
    let continuous = LatentGrid::from_sites_tensor((h, w, d), g.value(sites), None)?;
    let quantized = dequantize_to_entries(&continuous, &codebook, &comp)?;
    comp.decode(&vq.store, &quantized)
}

/// Snap a continuous latent onto its nearest codebook entries, in the
/// representation the decoder was trained on (raw or z-scored per the
/// lookup mode).
fn dequantize_to_entries(
    z: &LatentGrid,
    cb: &Codebook,
    comp: &CompressorModel,
) -> Result<LatentGrid, TrainError> {
    use crate::codebook::LookupMode;
    let mode = comp.cfg.lookup_mode;
    let indices = cb.assign_batch(&z.values, mode);
    let mut values = vec![0.0; z.values.len()];
    match mode {
        LookupMode::Raw => {
            for (s, &idx) in indices.iter().enumerate() {
                values[s * z.n_z..(s + 1) * z.n_z].copy_from_slice(cb.entry(idx));
            }
        }
        LookupMode::Normalized => {
            let table = cb.standardized_entries();
            for (s, &idx) in indices.iter().enumerate() {
                values[s * z.n_z..(s + 1) * z.n_z]
                    .copy_from_slice(&table[idx * z.n_z..(idx + 1) * z.n_z]);
            }
        }
    }
    LatentGrid::new(z.dims, z.n_z, values, Some(indices))
}

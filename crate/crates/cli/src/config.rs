//! Declarative pipeline configuration.
//!
//! One JSON file drives every stage; command-line flags override individual
//! fields after the file loads. The `desk` profile is sized so the whole
//! pipeline runs on a laptop CPU; the `paper` profile carries the full-scale
//! hyperparameters for reference and is not expected to be runnable here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use xct_models::codebook::LookupMode;
use xct_models::compressor::CompressorConfig;
use xct_models::diffusion::DmConfig;
use xct_models::prior::PriorConfig;
use xct_models::reconstruct::SamplerOptions;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSection {
    /// Number of synthesized cases.
    pub count: usize,
    /// Fraction of cases assigned to the training split.
    pub train_fraction: f64,
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub hu_window: (f64, f64),
    pub hu_jitter: f64,
    pub geom_jitter: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 20,
            train_fraction: 0.9,
            dims: (32, 32, 32),
            spacing_mm: (5.0, 5.0, 5.0),
            hu_window: (-1000.0, 1000.0),
            hu_jitter: 0.10,
            geom_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorSection {
    pub mu_water: f64,
    pub gantry_angle_deg: f64,
    pub samples_per_voxel: usize,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        ProjectorSection {
            mu_water: 0.0206,
            gantry_angle_deg: 0.0,
            samples_per_voxel: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub psnr_cap_db: f64,
    pub ssim_window: usize,
    pub perceptual_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            psnr_cap_db: 99.0,
            ssim_window: 7,
            perceptual_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Base seed; per-case phantom seeds derive from it.
    pub seed: u64,
    pub phantom: PhantomSection,
    pub projector: ProjectorSection,
    pub vq: CompressorConfig,
    pub prior: PriorConfig,
    pub dm: DmConfig,
    pub sampler: SamplerOptions,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("runs/desk"),
            seed: 7,
            phantom: PhantomSection::default(),
            projector: ProjectorSection::default(),
            vq: CompressorConfig::default(),
            prior: PriorConfig::default(),
            dm: DmConfig::default(),
            sampler: SamplerOptions::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Full-scale hyperparameters for reference: 128^3 volumes, an
    /// 8192-entry codebook, and the published iteration counts. Far beyond
    /// desk-scale budgets.
    pub fn paper_profile() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.out_dir = PathBuf::from("runs/paper");
        cfg.phantom.count = 1018;
        cfg.phantom.train_fraction = 0.9;
        cfg.phantom.dims = (128, 128, 128);
        cfg.phantom.spacing_mm = (2.5, 2.5, 2.5);
        cfg.vq = CompressorConfig {
            volume_dims: (128, 128, 128),
            channels: (32, 64),
            n_z: 8,
            codebook_size: 8192,
            sr_channels: 16,
            disc_channels: 32,
            iterations: 80_000,
            batch_size: 1,
            lr: 2e-4,
            ..CompressorConfig::default()
        };
        cfg.prior = PriorConfig {
            radiograph_dims: (128, 128),
            latent_dims: (32, 32, 32),
            n_z: 8,
            feature_channels: 64,
            mlp_hidden: 128,
            iterations: 50_000,
            batch_size: 16,
            lr: 1e-4,
            ..PriorConfig::default()
        };
        cfg.dm = DmConfig {
            latent_dims: (32, 32, 32),
            n_z: 8,
            channels: (64, 96, 128),
            attn_dim: 64,
            heads: 8,
            t_steps: 1000,
            iterations: 100_000,
            batch_size: 8,
            lr: 1e-4,
            ..DmConfig::default()
        };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-section consistency: stage geometries must agree with the
    /// phantom grid.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.phantom;
        if p.count < 2 {
            return Err(CliError::config("phantom.count must be >= 2"));
        }
        if !(0.0..1.0).contains(&p.train_fraction) {
            return Err(CliError::config("train_fraction must be in [0, 1)"));
        }
        if self.vq.volume_dims != p.dims {
            return Err(CliError::config(format!(
                "vq.volume_dims {:?} != phantom.dims {:?}",
                self.vq.volume_dims, p.dims
            )));
        }
        let latent = self.vq.latent_dims();
        if self.prior.latent_dims != latent || self.dm.latent_dims != latent {
            return Err(CliError::config(format!(
                "prior/dm latent dims must equal the compressor latent {latent:?}"
            )));
        }
        if self.prior.n_z != self.vq.n_z || self.dm.n_z != self.vq.n_z {
            return Err(CliError::config("n_z must agree across stages"));
        }
        if self.prior.radiograph_dims != (p.dims.0, p.dims.1) && self.prior.stack_depth == 2 {
            // stack depth 2 consumes the full-resolution radiograph
            if self.prior.radiograph_dims != (p.dims.0, p.dims.1) {
                return Err(CliError::config(format!(
                    "prior.radiograph_dims {:?} != phantom (H, W) {:?}",
                    self.prior.radiograph_dims,
                    (p.dims.0, p.dims.1)
                )));
            }
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.dm.t_steps {
            return Err(CliError::config("sampler.steps must be in 1..=dm.t_steps"));
        }
        if self.prior.lookup_mode != self.vq.lookup_mode {
            return Err(CliError::config("prior.lookup_mode must match vq.lookup_mode"));
        }
        self.vq.validate().map_err(CliError::from_train_config)?;
        self.prior.validate().map_err(CliError::from_train_config)?;
        self.dm.validate().map_err(CliError::from_train_config)?;
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        xct_core::content_hash_bytes(self.canonical_json().as_bytes())
    }

    pub fn train_count(&self) -> usize {
        (self.phantom.count as f64 * self.phantom.train_fraction).round() as usize
    }

    /// Lookup mode shared between the compressor and downstream stages.
    pub fn lookup_mode(&self) -> LookupMode {
        self.vq.lookup_mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_split_matches() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_count(), 18);
        assert_eq!(cfg.phantom.count - cfg.train_count(), 2);
    }

    #[test]
    fn json_roundtrip_preserves_config() {
        let cfg = PipelineConfig::default();
        let text = cfg.canonical_json();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn geometry_mismatches_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.phantom.dims = (64, 64, 64);
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.prior.latent_dims = (4, 4, 4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_profile_is_internally_consistent() {
        PipelineConfig::paper_profile().validate().unwrap();
    }
}

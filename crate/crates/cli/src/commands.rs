//! The five pipeline commands: synth, train, reconstruct, evaluate, and
//! inspect-checkpoint. All artifact paths live under the configured out_dir:
//!
//! ```text
//! out_dir/
//!   corpus/case_###.xvol,.ximg + corpus/manifest.json (split + hashes)
//!   checkpoints/{vq,prior,dm}.xckp
//!   logs/{vq,prior,dm}_train.csv
//!   reports/report.{csv,json} + recon volumes/slices
//!   manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use xct_core::io::{
    export_gray, export_radiograph_image, load_radiograph, load_volume, save_radiograph,
    save_volume, volume_slice, SlicePlane,
};
use xct_core::metrics::{aggregate, psnr, ssim3d, CaseMetrics, MetricReport, PerceptualNet};
use xct_core::phantom::{generate_phantom, PhantomParams};
use xct_core::projector::{hu_to_attenuation, project_angle, project_frontal, Radiograph};
use xct_core::volume::{normalize_hu, Unit, Volume};
use xct_models::codebook::Codebook;
use xct_models::compressor::{train_compressor, CompressorModel};
use xct_models::diffusion::{train_diffusion, DmTrainItem};
use xct_models::prior::{prepare_prior_dataset, train_prior, PriorModel};
use xct_models::reconstruct::{reconstruct_volume, SamplerOptions};
use xct_nn::checkpoint::Checkpoint;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::manifest::{file_hash, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vq,
    Prior,
    Dm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vq => "vq",
            Stage::Prior => "prior",
            Stage::Dm => "dm",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub case_seeds: BTreeMap<String, u64>,
    pub file_hashes: BTreeMap<String, String>,
}

impl CorpusManifest {
    fn path_in(out_dir: &Path) -> PathBuf {
        out_dir.join("corpus").join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Self, CliError> {
        let path = Self::path_in(out_dir);
        if !path.exists() {
            return Err(CliError::dependency(
                "corpus not found; run `xct synth` first",
            ));
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Other(format!("bad corpus manifest: {e}")))
    }
}

fn corpus_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn checkpoint_path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.out_dir.join("checkpoints").join(format!("{}.xckp", stage.name()))
}

fn volume_path(cfg: &PipelineConfig, case: &str) -> PathBuf {
    corpus_dir(cfg).join(format!("{case}.xvol"))
}

fn radiograph_path(cfg: &PipelineConfig, case: &str) -> PathBuf {
    corpus_dir(cfg).join(format!("{case}.ximg"))
}

/// Synthesize the phantom corpus: per case a normalized volume and its
/// frontal line-integral radiograph, plus the recorded train/test split.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<CorpusManifest, CliError> {
    cfg.validate()?;
    let dir = corpus_dir(cfg);
    fs::create_dir_all(&dir)?;

    let extent = [
        cfg.phantom.dims.0 as f64 * cfg.phantom.spacing_mm.0,
        cfg.phantom.dims.1 as f64 * cfg.phantom.spacing_mm.1,
        cfg.phantom.dims.2 as f64 * cfg.phantom.spacing_mm.2,
    ];
    let n_train = cfg.train_count();
    let mut manifest = CorpusManifest {
        train: Vec::new(),
        test: Vec::new(),
        case_seeds: BTreeMap::new(),
        file_hashes: BTreeMap::new(),
    };

    for idx in 0..cfg.phantom.count {
        let case = format!("case_{idx:03}");
        let case_seed = cfg.seed.wrapping_add(idx as u64);
        let mut params = PhantomParams::for_extent(case_seed, extent);
        params.hu_jitter = cfg.phantom.hu_jitter;
        params.geom_jitter = cfg.phantom.geom_jitter;
        let (hu, _labels) = generate_phantom(&params, cfg.phantom.dims, cfg.phantom.spacing_mm)?;
        let normalized = normalize_hu(&hu, cfg.phantom.hu_window)?;

        let mu = hu_to_attenuation(&hu, cfg.projector.mu_water)?;
        let radiograph = if cfg.projector.gantry_angle_deg == 0.0 {
            project_frontal(&mu)?
        } else {
            project_angle(
                &mu,
                cfg.projector.gantry_angle_deg,
                cfg.projector.samples_per_voxel,
            )?
        };

        let vpath = volume_path(cfg, &case);
        let rpath = radiograph_path(cfg, &case);
        save_volume(&vpath, &normalized)?;
        save_radiograph(&rpath, &radiograph)?;
        manifest
            .file_hashes
            .insert(format!("{case}.xvol"), file_hash(&vpath)?);
        manifest
            .file_hashes
            .insert(format!("{case}.ximg"), file_hash(&rpath)?);
        manifest.case_seeds.insert(case.clone(), case_seed);
        if idx < n_train {
            manifest.train.push(case);
        } else {
            manifest.test.push(case);
        }
    }

    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(CorpusManifest::path_in(&cfg.out_dir), text)?;
    log::info!(
        "synthesized {} cases ({} train / {} test) in {}",
        cfg.phantom.count,
        manifest.train.len(),
        manifest.test.len(),
        dir.display()
    );
    Ok(manifest)
}

fn load_split_volumes(cfg: &PipelineConfig, cases: &[String]) -> Result<Vec<Volume>, CliError> {
    cases
        .iter()
        .map(|c| Ok(load_volume(&volume_path(cfg, c))?))
        .collect()
}

fn load_split_pairs(
    cfg: &PipelineConfig,
    cases: &[String],
) -> Result<Vec<(Radiograph, Volume)>, CliError> {
    cases
        .iter()
        .map(|c| {
            let r = load_radiograph(&radiograph_path(cfg, c))?;
            let v = load_volume(&volume_path(cfg, c))?;
            Ok((r, v))
        })
        .collect()
}

/// Train one stage, writing its checkpoint, CSV log, and manifest entry.
/// Dependencies are hash-verified before any work starts.
pub fn cmd_train(cfg: &PipelineConfig, stage: Stage, resume: bool) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let corpus = CorpusManifest::load(&cfg.out_dir)?;
    let mut run = RunManifest::load_or_default(&cfg.out_dir, &cfg.hash())?;
    fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
    fs::create_dir_all(cfg.out_dir.join("logs"))?;

    let ckpt_path = checkpoint_path(cfg, stage);
    let log_path = cfg
        .out_dir
        .join("logs")
        .join(format!("{}_train.csv", stage.name()));
    let resume_ckpt = if resume && ckpt_path.exists() {
        Some(Checkpoint::load(&ckpt_path)?)
    } else {
        None
    };

    let start = Instant::now();
    let checkpoint = match stage {
        Stage::Vq => {
            let volumes = load_split_volumes(cfg, &corpus.train)?;
            let mut log_file = fs::File::create(&log_path)?;
            train_compressor(&volumes, &cfg.vq, resume_ckpt, Some(&mut log_file))?
        }
        Stage::Prior => {
            let vq_entry = run.verified_stage(Stage::Vq.name())?;
            let vq_ckpt = Checkpoint::load(&vq_entry.path)?;
            let (comp, cb) = CompressorModel::from_checkpoint(&vq_ckpt)?;
            let pairs = load_split_pairs(cfg, &corpus.train)?;
            let items = prepare_prior_dataset(&pairs, &comp, &vq_ckpt.store, &cb, &cfg.prior)?;
            let mut log_file = fs::File::create(&log_path)?;
            train_prior(&items, &cb, &cfg.prior, resume_ckpt, Some(&mut log_file))?
        }
        Stage::Dm => {
            let vq_entry = run.verified_stage(Stage::Vq.name())?;
            let prior_entry = run.verified_stage(Stage::Prior.name())?;
            let vq_ckpt = Checkpoint::load(&vq_entry.path)?;
            let prior_ckpt = Checkpoint::load(&prior_entry.path)?;
            let pairs = load_split_pairs(cfg, &corpus.train)?;
            let (items, latent_scale) =
                prepare_dm_dataset(cfg, &vq_ckpt, &prior_ckpt, &pairs)?;
            let mut log_file = fs::File::create(&log_path)?;
            train_diffusion(&items, &cfg.dm, latent_scale, resume_ckpt, Some(&mut log_file))?
        }
    };
    checkpoint.save(&ckpt_path)?;
    let elapsed = start.elapsed().as_secs_f64();

    run.record_stage(stage.name(), ckpt_path.clone(), checkpoint.iteration, elapsed)?;
    run.seeds.insert(
        format!("{}_seed", stage.name()),
        match stage {
            Stage::Vq => cfg.vq.seed,
            Stage::Prior => cfg.prior.seed,
            Stage::Dm => cfg.dm.seed,
        },
    );
    run.save(&cfg.out_dir)?;
    log::info!(
        "stage {} finished in {elapsed:.1}s -> {}",
        stage.name(),
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

/// Quantized, scale-normalized latents plus prior tokens for every pair.
fn prepare_dm_dataset(
    cfg: &PipelineConfig,
    vq_ckpt: &Checkpoint,
    prior_ckpt: &Checkpoint,
    pairs: &[(Radiograph, Volume)],
) -> Result<(Vec<DmTrainItem>, f64), CliError> {
    let (comp, mut cb) = CompressorModel::from_checkpoint(vq_ckpt)?;
    let prior_model = PriorModel::from_checkpoint(prior_ckpt)?;
    let (h, w, d) = comp.cfg.latent_dims();

    let mut raw: Vec<(Vec<f64>, xct_nn::Tensor)> = Vec::with_capacity(pairs.len());
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for (r, v) in pairs {
        let z = comp.encode(&vq_ckpt.store, v)?;
        let (zq, _) = xct_models::codebook::quantize(
            &z,
            &mut cb,
            comp.cfg.lookup_mode,
            comp.cfg.homogeneous_vq_loss,
        )?;
        let tokens = prior_model.encode_prior(&prior_ckpt.store, r, &cb)?;
        for &x in &zq.values {
            sq_sum += x * x;
        }
        count += zq.values.len();
        raw.push((zq.values, tokens.to_tensor()));
    }
    let rms = (sq_sum / count as f64).sqrt();
    let latent_scale = if rms > 1e-12 { rms } else { 1.0 };

    let n_z = comp.cfg.n_z;
    let items = raw
        .into_iter()
        .map(|(values, tokens)| {
            let scaled: Vec<f64> = values.iter().map(|v| v / latent_scale).collect();
            // sites [S, n_z] -> grid [n_z, d, h, w]
            let mut g = xct_nn::Graph::new();
            let sites =
                g.input(xct_nn::Tensor::new(vec![h * w * d, n_z], scaled).expect("consistent"));
            let grid = g.sites_to_grid(sites, n_z, (h, w, d));
            DmTrainItem {
                x0: g.value(grid).clone(),
                tokens,
            }
        })
        .collect();
    Ok((items, latent_scale))
}

/// Reconstruct a CT volume from one radiograph file. Emits the volume plus
/// center slices in the three anatomical planes.
pub fn cmd_reconstruct(
    cfg: &PipelineConfig,
    radiograph_file: &Path,
    out_base: &Path,
    opts: &SamplerOptions,
) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let run = RunManifest::load_or_default(&cfg.out_dir, &cfg.hash())?;
    let vq = Checkpoint::load(&run.verified_stage(Stage::Vq.name())?.path)?;
    let prior = Checkpoint::load(&run.verified_stage(Stage::Prior.name())?.path)?;
    let dm = Checkpoint::load(&run.verified_stage(Stage::Dm.name())?.path)?;

    let radiograph = load_radiograph(radiograph_file)?;
    let recon = reconstruct_volume(&radiograph, &vq, &prior, &dm, opts)?;
    // Re-stamp physical spacing from the pipeline geometry.
    let recon = Volume::new(
        recon.dims(),
        cfg.phantom.spacing_mm,
        Unit::Normalized,
        recon.values().to_vec(),
    )?;

    if let Some(parent) = out_base.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let vol_path = out_base.with_extension("xvol");
    save_volume(&vol_path, &recon)?;
    let (hh, ww, dd) = recon.dims();
    for (plane, idx, tag) in [
        (SlicePlane::Transverse, hh / 2, "transverse"),
        (SlicePlane::Sagittal, ww / 2, "sagittal"),
        (SlicePlane::Coronal, dd / 2, "coronal"),
    ] {
        let (rows, cols, data) = volume_slice(&recon, plane, idx)?;
        let png = out_base.with_extension(format!("{tag}.png"));
        export_gray(&png, rows, cols, &data)?;
    }
    log::info!("reconstruction written to {}", vol_path.display());
    Ok(vol_path)
}

/// Reconstruct every test case and write the metric report (CSV + JSON).
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<MetricReport, CliError> {
    cfg.validate()?;
    let corpus = CorpusManifest::load(&cfg.out_dir)?;
    if corpus.test.is_empty() {
        return Err(CliError::config("test split is empty; nothing to evaluate"));
    }
    let mut run = RunManifest::load_or_default(&cfg.out_dir, &cfg.hash())?;
    let vq = Checkpoint::load(&run.verified_stage(Stage::Vq.name())?.path)?;
    let prior = Checkpoint::load(&run.verified_stage(Stage::Prior.name())?.path)?;
    let dm = Checkpoint::load(&run.verified_stage(Stage::Dm.name())?.path)?;

    let report_dir = cfg.out_dir.join("reports");
    fs::create_dir_all(&report_dir)?;
    let perceptual = PerceptualNet::new(cfg.eval.perceptual_seed);

    let mut rows = Vec::new();
    for (case_idx, case) in corpus.test.iter().enumerate() {
        let radiograph = load_radiograph(&radiograph_path(cfg, case))?;
        let truth = load_volume(&volume_path(cfg, case))?;
        let opts = SamplerOptions {
            seed: cfg.sampler.seed.wrapping_add(case_idx as u64),
            ..cfg.sampler
        };
        let recon = reconstruct_volume(&radiograph, &vq, &prior, &dm, &opts)?;
        let recon = Volume::new(
            recon.dims(),
            cfg.phantom.spacing_mm,
            Unit::Normalized,
            recon.values().to_vec(),
        )?;
        save_volume(&report_dir.join(format!("{case}_recon.xvol")), &recon)?;
        export_radiograph_image(&report_dir.join(format!("{case}_drr.png")), &radiograph)?;

        let psnr_db = psnr(&truth, &recon, 2.0, cfg.eval.psnr_cap_db)?;
        let ssim = ssim3d(&truth, &recon, cfg.eval.ssim_window, 0.01, 0.03, 2.0)?;
        let perc = perceptual.distance(&truth, &recon)?;
        rows.push(CaseMetrics {
            case_id: case.clone(),
            psnr_db,
            ssim,
            perceptual: perc,
        });
        log::info!("{case}: psnr {psnr_db:.2} dB ssim {ssim:.4} perceptual {perc:.5}");
    }

    let report = aggregate(rows)?;
    let csv_path = report_dir.join("report.csv");
    let json_path = report_dir.join("report.json");
    let mut csv = fs::File::create(&csv_path)?;
    csv.write_all(report.to_csv().as_bytes())?;
    let summary = report.to_json_summary(
        serde_json::to_value(cfg).expect("config serializes"),
    );
    fs::write(&json_path, serde_json::to_string_pretty(&summary).expect("serializes"))?;

    run.record_report("report_csv", csv_path)?;
    run.record_report("report_json", json_path)?;
    run.save(&cfg.out_dir)?;
    Ok(report)
}

/// Print checkpoint metadata: stage, iteration, model config, tensor table,
/// and codebook stats.
pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let ckpt = Checkpoint::load(path)?;
    let mut out = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(out, "stage: {}", ckpt.stage);
    let _ = writeln!(out, "iteration: {}", ckpt.iteration);
    let _ = writeln!(out, "adam steps: {}", ckpt.store.adam_t);
    let _ = writeln!(out, "rng: {}", if ckpt.rng.is_some() { "present" } else { "absent" });
    let _ = writeln!(out, "config: {}", ckpt.config_json);
    let _ = writeln!(out, "tensors ({}):", ckpt.store.len());
    for p in ckpt.store.iter() {
        let _ = writeln!(
            out,
            "  {} {:?}{}",
            p.name,
            p.value.shape(),
            if p.trainable { "" } else { " (frozen)" }
        );
    }
    match &ckpt.codebook {
        Some(cb) => {
            let codebook = Codebook::new(cb.n, cb.n_z, cb.entries.clone())
                .map(|mut c| {
                    c.usage = cb.usage.clone();
                    c
                })
                .map_err(CliError::from)?;
            let _ = writeln!(
                out,
                "codebook: {} x {} entries, usage {:.1}% ({} assignments)",
                cb.n,
                cb.n_z,
                codebook.usage_fraction() * 100.0,
                codebook.total_usage()
            );
        }
        None => {
            let _ = writeln!(out, "codebook: none");
        }
    }
    Ok(out)
}
